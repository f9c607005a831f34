use crate::error::{Error, Result};

/// One annotation in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelBox {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class_id, cx, cy, w, h }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn is_inside_unit(&self) -> bool {
        self.corners().iter().all(|c| (0.0..=1.0).contains(c)) && self.w > 0.0 && self.h > 0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedLabels {
    pub boxes: Vec<LabelBox>,
    /// Boxes that extended past the image and were clipped.
    pub clipped: usize,
    /// Boxes dropped because nothing was left after clipping.
    pub dropped: usize,
}

/// Parses YOLO-format labels, one `class cx cy w h` per line. Blank lines are
/// skipped; boxes reaching outside the unit square are clipped to it.
pub fn parse_label_file(text: &str, num_classes: usize) -> Result<ParsedLabels> {
    let mut out = ParsedLabels::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let class_id: usize = fields[0].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("class id {:?} is not a non-negative integer", fields[0]),
        })?;
        if class_id >= num_classes {
            return Err(Error::Parse {
                line,
                msg: format!("class id {class_id} out of range for {num_classes} classes"),
            });
        }
        let mut v = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("{f:?} is not a finite number"),
                })?;
        }
        if v[2] < 0.0 || v[3] < 0.0 {
            return Err(Error::Parse {
                line,
                msg: "negative box size".into(),
            });
        }
        let b = LabelBox::new(class_id, v[0], v[1], v[2], v[3]);
        if b.is_inside_unit() {
            out.boxes.push(b);
            continue;
        }
        let [x1, y1, x2, y2] = b.corners().map(|c| c.clamp(0.0, 1.0));
        if x2 - x1 <= 0.0 || y2 - y1 <= 0.0 {
            out.dropped += 1;
            continue;
        }
        out.clipped += 1;
        out.boxes
            .push(LabelBox::new(class_id, (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1));
    }
    Ok(out)
}

pub fn render_label_file(boxes: &[LabelBox]) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {} {} {} {}\n", b.class_id, b.cx, b.cy, b.w, b.h))
        .collect()
}
