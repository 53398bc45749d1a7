//! Confusion counts, change-class metrics and confusion-mask rendering.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major `{0, 1}` mask; 1 marks change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidTarget { value: v });
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn inverted(&self) -> Self {
        BinaryMask { height: self.height, width: self.width, data: self.data.iter().map(|v| 1 - v).collect() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn check_same(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::InvalidArgument(format!(
            "prediction {}x{} and ground truth {}x{} differ in size",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// Per-pixel tally with change as the positive class.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    check_same(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data.iter().zip(&gt.data) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (1, 0) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Metrics whose denominator was zero; their value is reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Undefined {
    pub iou: bool,
    pub prec: bool,
    pub rec: bool,
    pub f1: bool,
}

impl Undefined {
    pub fn any(&self) -> bool {
        self.iou || self.prec || self.rec || self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub iou: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
    pub oa: f64,
    pub undefined: Undefined,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

pub fn metrics(c: &ConfusionCounts) -> Result<MetricSet> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyConfusion);
    }
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let mut u = Undefined::default();
    let iou = ratio(tp, tp + fn_ + fp, &mut u.iou);
    let prec = ratio(tp, tp + fp, &mut u.prec);
    let rec = ratio(tp, tp + fn_, &mut u.rec);
    let f1 = ratio(2.0 * prec * rec, prec + rec, &mut u.f1);
    let oa = (tp + tn) / total as f64;
    Ok(MetricSet { iou, prec, rec, f1, oa, undefined: u })
}

pub const TP_COLOR: Rgb<u8> = Rgb([255, 255, 255]);
pub const TN_COLOR: Rgb<u8> = Rgb([0, 0, 0]);
pub const FP_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const FN_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

/// White TP, black TN, green FP, red FN.
pub fn render_confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<RgbImage> {
    check_same(pred, gt)?;
    Ok(RgbImage::from_fn(pred.width as u32, pred.height as u32, |x, y| {
        match (pred.get(y as usize, x as usize), gt.get(y as usize, x as usize)) {
            (1, 1) => TP_COLOR,
            (0, 0) => TN_COLOR,
            (1, 0) => FP_COLOR,
            _ => FN_COLOR,
        }
    }))
}

/// Inverse of [`render_confusion`].
pub fn decode_confusion(img: &RgbImage) -> Result<(BinaryMask, BinaryMask)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pred = Vec::with_capacity(w * h);
    let mut gt = Vec::with_capacity(w * h);
    for px in img.pixels() {
        let (p, t) = match *px {
            c if c == TP_COLOR => (1, 1),
            c if c == TN_COLOR => (0, 0),
            c if c == FP_COLOR => (1, 0),
            c if c == FN_COLOR => (0, 1),
            c => return Err(Error::InvalidArgument(format!("{c:?} is not a confusion colour"))),
        };
        pred.push(p);
        gt.push(t);
    }
    Ok((BinaryMask::new(h, w, pred)?, BinaryMask::new(h, w, gt)?))
}

pub const METRICS_CSV_HEADER: &str = "run,OA,IoU,F1,Rec,Prec";

/// One row per run, metrics in percent with two decimals.
pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricSet)>) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for (name, m) in rows {
        writeln!(
            out,
            "{name},{:.2},{:.2},{:.2},{:.2},{:.2}",
            m.oa * 100.0,
            m.iou * 100.0,
            m.f1 * 100.0,
            m.rec * 100.0,
            m.prec * 100.0
        )
        .unwrap();
    }
    out
}

/// Long-format `metric,model,value` rows for radar plots.
pub fn radar_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricSet)>) -> String {
    let mut out = String::from("metric,model,value\n");
    for (name, m) in rows {
        for (metric, v) in [("OA", m.oa), ("IoU", m.iou), ("F1", m.f1), ("Rec", m.rec), ("Prec", m.prec)] {
            writeln!(out, "{metric},{name},{:.2}", v * 100.0).unwrap();
        }
    }
    out
}
