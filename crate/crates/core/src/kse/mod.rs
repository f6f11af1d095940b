//! Keypoint-match context and the learned sensor-error model.
//!
//! A frame's keypoint matches are flattened into a fixed-size `Len x 7`
//! matrix (normalized pixel coordinates, match score and two learned
//! semantic encodings), sorted by match score. A PointNet-style network
//! maps that matrix to a zero-mean 2D Gaussian mixture over the car-frame
//! localization error; see [`net`].

pub mod baseline;
pub mod net;
pub mod train;

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gm::{rotation, Vec2};

/// Number of semantic classes (Cityscapes order).
pub const NUM_CLASSES: usize = 19;
pub const ROW_WIDTH: usize = 7;
pub const DEFAULT_LEN: usize = 256;

/// Cityscapes class names, indexed by class id.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Classes whose keypoints sit on objects that move between traversals.
pub const DYNAMIC_CLASSES: [u8; 8] = [11, 12, 13, 14, 15, 16, 17, 18];

pub fn is_dynamic(class: u8) -> bool {
    DYNAMIC_CLASSES.contains(&class)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointMatch {
    pub xq: f64,
    pub yq: f64,
    pub xr: f64,
    pub yr: f64,
    pub ms: f64,
    #[serde(rename = "cq")]
    pub class_q: u8,
    #[serde(rename = "cr")]
    pub class_r: u8,
}

/// One query/reference pair: matches plus the measured and true locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FrameWire", into = "FrameWire")]
pub struct FrameContext {
    pub matches: Vec<KeypointMatch>,
    pub r_hat: Vec2,
    pub r_gt: Option<Vec2>,
    /// Query heading, used to express errors in the car frame.
    pub heading: f64,
    pub width: u32,
    pub height: u32,
    pub condition: String,
}

impl FrameContext {
    pub fn n_kpm(&self) -> usize {
        self.matches.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        for (i, m) in self.matches.iter().enumerate() {
            let inside = |v: f64, hi: f64| (0.0..=hi).contains(&v);
            if !(inside(m.xq, w) && inside(m.yq, h) && inside(m.xr, w) && inside(m.yr, h)) {
                return Err(Error::InvalidArgument(format!("match {i} lies outside the image")));
            }
            if !(0.0..=1.0).contains(&m.ms) {
                return Err(Error::InvalidArgument(format!("match {i} score {} outside [0, 1]", m.ms)));
            }
        }
        if !self.r_hat.iter().all(|v| v.is_finite()) || !self.heading.is_finite() {
            return Err(Error::InvalidArgument("non-finite location or heading".into()));
        }
        Ok(())
    }

    /// `r_gt - r_hat` rotated into the car frame.
    pub fn car_frame_error(&self) -> Option<Vec2> {
        self.r_gt.map(|gt| rotation(-self.heading) * (gt - self.r_hat))
    }
}

#[derive(Serialize, Deserialize)]
struct FrameWire {
    r_hat: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_gt: Option<[f64; 2]>,
    #[serde(default)]
    heading: f64,
    #[serde(rename = "W")]
    width: u32,
    #[serde(rename = "H")]
    height: u32,
    #[serde(default)]
    condition: String,
    matches: Vec<KeypointMatch>,
}

impl TryFrom<FrameWire> for FrameContext {
    type Error = Error;

    fn try_from(w: FrameWire) -> Result<Self> {
        let fc = FrameContext {
            matches: w.matches,
            r_hat: Vec2::new(w.r_hat[0], w.r_hat[1]),
            r_gt: w.r_gt.map(|g| Vec2::new(g[0], g[1])),
            heading: w.heading,
            width: w.width,
            height: w.height,
            condition: w.condition,
        };
        fc.validate()?;
        Ok(fc)
    }
}

impl From<FrameContext> for FrameWire {
    fn from(fc: FrameContext) -> Self {
        FrameWire {
            r_hat: [fc.r_hat.x, fc.r_hat.y],
            r_gt: fc.r_gt.map(|g| [g.x, g.y]),
            heading: fc.heading,
            width: fc.width,
            height: fc.height,
            condition: fc.condition,
            matches: fc.matches,
        }
    }
}

/// One learned scalar per semantic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticTable {
    pub values: [f64; NUM_CLASSES],
}

impl SemanticTable {
    /// Uniform(-0.1, 0.1) draws.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { values: std::array::from_fn(|_| rng.random_range(-0.1..0.1)) }
    }

    pub fn lookup(&self, class: u8) -> Result<f64> {
        self.values
            .get(class as usize)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("class id {class} outside 0..{NUM_CLASSES}")))
    }
}

/// Fixed-size network input.
///
/// Row `i < valid_count` is match `i` in descending match-score order;
/// the rest are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DkpmMatrix {
    rows: DMatrix<f64>,
    valid_count: usize,
    classes: Vec<(u8, u8)>,
}

impl DkpmMatrix {
    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    /// `(query, reference)` class ids of the valid rows.
    pub fn classes(&self) -> &[(u8, u8)] {
        &self.classes
    }

    /// Rewrites the two semantic columns from `table`.
    pub fn apply_table(&mut self, table: &SemanticTable) {
        for (i, (cq, cr)) in self.classes.iter().enumerate() {
            self.rows[(i, 5)] = table.values[*cq as usize];
            self.rows[(i, 6)] = table.values[*cr as usize];
        }
    }
}

pub fn build_dkpm(fc: &FrameContext, table: &SemanticTable, len: usize) -> Result<DkpmMatrix> {
    if len == 0 {
        return Err(Error::InvalidArgument("Len must be positive".into()));
    }
    fc.validate()?;
    for m in &fc.matches {
        table.lookup(m.class_q)?;
        table.lookup(m.class_r)?;
    }
    let mut order: Vec<usize> = (0..fc.matches.len()).collect();
    // stable: equal scores keep their original order
    order.sort_by(|&a, &b| fc.matches[b].ms.total_cmp(&fc.matches[a].ms));
    order.truncate(len);

    let (w, h) = ((fc.width.max(2) - 1) as f64, (fc.height.max(2) - 1) as f64);
    let mut rows = DMatrix::zeros(len, ROW_WIDTH);
    let mut classes = Vec::with_capacity(order.len());
    for (i, &j) in order.iter().enumerate() {
        let m = &fc.matches[j];
        rows[(i, 0)] = m.xq / w;
        rows[(i, 1)] = m.yq / h;
        rows[(i, 2)] = m.xr / w;
        rows[(i, 3)] = m.yr / h;
        rows[(i, 4)] = m.ms;
        classes.push((m.class_q, m.class_r));
    }
    let mut d = DkpmMatrix { rows, valid_count: order.len(), classes };
    d.apply_table(table);
    Ok(d)
}

/// Reads one JSON value per non-blank line; errors name the 1-based line.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut writer: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
