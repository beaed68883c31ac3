//! Overlap and topology metrics for binary masks, and per-split aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::{BinaryMask, LabelImage};
use crate::{Error, Result};

fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize)> {
    pred.check_shape(gt)?;
    let (mut p, mut g, mut both) = (0, 0, 0);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    Ok((p, g, both))
}

/// `2|P∩G| / (|P|+|G|)`, 1 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (p, g, both) = overlap(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Prediction empty while the ground truth is not; precision reported as 0.
    pub precision_undefined: bool,
    /// Ground truth empty while the prediction is not; recall reported as 0.
    pub recall_undefined: bool,
}

pub fn precision_recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<PrecisionRecall> {
    let (p, g, both) = overlap(pred, gt)?;
    let ratio = |num: usize, den: usize, other: usize| -> (f64, bool) {
        match (den, other) {
            (0, 0) => (1.0, false),
            (0, _) => (0.0, true),
            _ => (num as f64 / den as f64, false),
        }
    };
    let (precision, precision_undefined) = ratio(both, p, g);
    let (recall, recall_undefined) = ratio(both, g, p);
    Ok(PrecisionRecall {
        precision,
        recall,
        precision_undefined,
        recall_undefined,
    })
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

fn neighborhood(m: &BinaryMask, y: usize, x: usize) -> [[bool; 3]; 3] {
    let mut n = [[false; 3]; 3];
    for (dy, row) in n.iter_mut().enumerate() {
        for (dx, cell) in row.iter_mut().enumerate() {
            let (yy, xx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
            if yy >= 0 && xx >= 0 && (yy as usize) < m.height && (xx as usize) < m.width {
                *cell = m.at(yy as usize, xx as usize);
            }
        }
    }
    n[1][1] = false;
    n
}

/// Components of cells with value `fg` among the 8 neighbours, connected with
/// 8-adjacency (`eight`) or 4-adjacency; with `touching`, only components
/// containing a 4-neighbour of the center are counted.
fn components(n: &[[bool; 3]; 3], fg: bool, eight: bool, touching: bool) -> usize {
    let mut seen = [[false; 3]; 3];
    let mut count = 0;
    for sy in 0..3 {
        for sx in 0..3 {
            if (sy, sx) == (1, 1) || n[sy][sx] != fg || seen[sy][sx] {
                continue;
            }
            let mut stack = alloc::vec![(sy, sx)];
            seen[sy][sx] = true;
            let mut touches = false;
            while let Some((cy, cx)) = stack.pop() {
                touches |= (cy == 1) != (cx == 1);
                for &(dy, dx) in &NEIGHBORS {
                    if !eight && dy != 0 && dx != 0 {
                        continue;
                    }
                    let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                    if !(0..3).contains(&ny) || !(0..3).contains(&nx) || (ny, nx) == (1, 1) {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if n[ny][nx] == fg && !seen[ny][nx] {
                        seen[ny][nx] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            if !touching || touches {
                count += 1;
            }
        }
    }
    count
}

/// A foreground pixel whose removal preserves topology under
/// (8, 4) connectivity.
pub fn is_simple(m: &BinaryMask, y: usize, x: usize) -> bool {
    let n = neighborhood(m, y, x);
    components(&n, true, true, false) == 1 && components(&n, false, false, true) == 1
}

/// Homotopic thinning with 8-connected foreground.
///
/// Each round makes four sequential passes removing north, south, east and
/// west border pixels in row-major order. A pixel is removed when it is
/// simple and has at least two foreground neighbours. Rounds repeat until a
/// round removes nothing.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let mut m = mask.clone();
    let dirs: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, 1), (0, -1)];
    loop {
        let mut changed = false;
        for &(dy, dx) in &dirs {
            for y in 0..m.height {
                for x in 0..m.width {
                    if !m.at(y, x) {
                        continue;
                    }
                    let (by, bx) = (y as isize + dy, x as isize + dx);
                    let border = by < 0
                        || bx < 0
                        || by as usize >= m.height
                        || bx as usize >= m.width
                        || !m.at(by as usize, bx as usize);
                    if !border {
                        continue;
                    }
                    let n = neighborhood(&m, y, x);
                    let degree = n.iter().flatten().filter(|&&b| b).count();
                    if degree >= 2 && is_simple(&m, y, x) {
                        m.set(y, x, false);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return m;
        }
    }
}

/// Connected components under 8-adjacency.
pub fn count_components(mask: &BinaryMask) -> usize {
    let mut seen = alloc::vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if !mask.data[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = alloc::vec![start];
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / mask.width) as isize, (i % mask.width) as isize);
            for &(dy, dx) in &NEIGHBORS {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny as usize >= mask.height || nx as usize >= mask.width {
                    continue;
                }
                let j = ny as usize * mask.width + nx as usize;
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

fn cldice_from_skeletons(
    pred: &BinaryMask,
    gt: &BinaryMask,
    skel_pred: &BinaryMask,
    skel_gt: &BinaryMask,
) -> f64 {
    let (np, ng) = (pred.count(), gt.count());
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let tprec = skel_pred.and(gt).count() as f64 / skel_pred.count() as f64;
    let tsens = skel_gt.and(pred).count() as f64 / skel_gt.count() as f64;
    if tprec + tsens == 0.0 {
        0.0
    } else {
        2.0 * tprec * tsens / (tprec + tsens)
    }
}

/// Harmonic mean of topology precision and topology sensitivity.
/// Both masks empty scores 1, exactly one empty scores 0.
pub fn cldice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_shape(gt)?;
    Ok(cldice_from_skeletons(pred, gt, &skeletonize(pred), &skeletonize(gt)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub cldice: f64,
}

impl MetricValues {
    pub const NAMES: [&'static str; 4] = ["Dice", "Precision", "Recall", "clDice"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.dice, self.precision, self.recall, self.cldice]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub vessels: MetricValues,
    pub brain: MetricValues,
    /// Degenerate empty-mask cases encountered while scoring.
    pub flags: Vec<String>,
}

fn accumulate(pred: &[BinaryMask], gt: &[BinaryMask], flags: &mut Vec<String>, what: &str) -> Result<MetricValues> {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    let (mut sp, mut sg, mut sp_in_g, mut sg_in_p) = (0usize, 0usize, 0usize, 0usize);
    for (a, b) in pred.iter().zip(gt) {
        let (pp, gg, bb) = overlap(a, b)?;
        p += pp;
        g += gg;
        both += bb;
        let (ka, kb) = (skeletonize(a), skeletonize(b));
        sp += ka.count();
        sg += kb.count();
        sp_in_g += ka.and(b).count();
        sg_in_p += kb.and(a).count();
    }
    let dice = if p + g == 0 { 1.0 } else { 2.0 * both as f64 / (p + g) as f64 };
    let frac = |num: usize, den: usize, other: usize, name: &str, flags: &mut Vec<String>| match (den, other) {
        (0, 0) => 1.0,
        (0, _) => {
            flags.push(format!("{what}: {name} undefined (empty mask), reported as 0"));
            0.0
        }
        _ => num as f64 / den as f64,
    };
    let precision = frac(both, p, g, "precision", flags);
    let recall = frac(both, g, p, "recall", flags);
    let cldice = if p + g == 0 {
        1.0
    } else if p == 0 || g == 0 {
        0.0
    } else {
        let tprec = sp_in_g as f64 / sp as f64;
        let tsens = sg_in_p as f64 / sg as f64;
        if tprec + tsens == 0.0 {
            0.0
        } else {
            2.0 * tprec * tsens / (tprec + tsens)
        }
    };
    Ok(MetricValues {
        dice,
        precision,
        recall,
        cldice,
    })
}

/// Scores a stack of label slices. Overlap counts are pooled over the stack;
/// skeletons are computed per slice. Vessel metrics only consider pixels
/// inside the ground-truth brain region.
pub fn evaluate_volume(id: &str, pred: &[LabelImage], gt: &[LabelImage]) -> Result<VolumeMetrics> {
    if pred.len() != gt.len() {
        return Err(crate::shape_err!("{} predicted vs {} ground-truth slices", pred.len(), gt.len()));
    }
    let mut flags = Vec::new();
    let mut pv = Vec::new();
    let mut gv = Vec::new();
    let mut pb = Vec::new();
    let mut gb = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        p.check_shape(g)?;
        p.validate()?;
        g.validate()?;
        let region = g.at_least(1);
        pv.push(p.equal_to(2).and(&region));
        gv.push(g.equal_to(2));
        pb.push(p.at_least(1));
        gb.push(region);
    }
    let vessels = accumulate(&pv, &gv, &mut flags, "vessels")?;
    let brain = accumulate(&pb, &gb, &mut flags, "brain")?;
    Ok(VolumeMetrics {
        id: id.into(),
        vessels,
        brain,
        flags,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyReport);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: libm::sqrt(var),
        })
    }

    /// Percentages with one decimal, e.g. `70.4 ± 2.4`.
    pub fn format_pct(&self) -> String {
        format_pct(self.mean, self.std)
    }
}

pub fn format_pct(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", mean * 100.0, std * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub dice: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub cldice: MeanStd,
}

impl ClassSummary {
    fn of(values: &[MetricValues]) -> Result<Self> {
        let col = |f: fn(&MetricValues) -> f64| MeanStd::of(&values.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            dice: col(|m| m.dice)?,
            precision: col(|m| m.precision)?,
            recall: col(|m| m.recall)?,
            cldice: col(|m| m.cldice)?,
        })
    }

    pub fn as_array(&self) -> [MeanStd; 4] {
        [self.dice, self.precision, self.recall, self.cldice]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub volumes: Vec<VolumeMetrics>,
    pub vessels: ClassSummary,
    pub brain: ClassSummary,
    pub std_definition: String,
}

pub fn aggregate(volumes: &[VolumeMetrics]) -> Result<MetricsReport> {
    if volumes.is_empty() {
        return Err(Error::EmptyReport);
    }
    let vessels: Vec<MetricValues> = volumes.iter().map(|v| v.vessels).collect();
    let brain: Vec<MetricValues> = volumes.iter().map(|v| v.brain).collect();
    Ok(MetricsReport {
        volumes: volumes.to_vec(),
        vessels: ClassSummary::of(&vessels)?,
        brain: ClassSummary::of(&brain)?,
        std_definition: "population".into(),
    })
}

impl MetricsReport {
    /// Plain-text table, one row per metric, one column per class.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>14} {:>14}\n", "Metric (%)", "Vessels", "Brain");
        let (v, b) = (self.vessels.as_array(), self.brain.as_array());
        for i in 0..4 {
            out += &format!(
                "{:<10} {:>14} {:>14}\n",
                MetricValues::NAMES[i],
                v[i].format_pct(),
                b[i].format_pct()
            );
        }
        out += &format!("n = {} volumes, {} std\n", self.volumes.len(), self.std_definition);
        out
    }
}
