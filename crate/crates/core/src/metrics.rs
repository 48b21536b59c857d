//! Overlap and surface metrics.
//!
//! Surfaces are the class voxels with at least one face neighbour outside the
//! class; the array border counts as outside. Distances between surfaces are
//! Euclidean in millimetres, computed with an exact separable distance
//! transform that honours anisotropic spacing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Shape3, Spacing3};

pub const DEFAULT_TOLERANCE_MM: f64 = 1.0;

/// Boundary voxels of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub indices: Vec<usize>,
    pub points: Vec<[f64; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(pred.shape().dims(), gt.shape().dims()));
    }
    Ok(())
}

pub fn class_mask(v: &LabelVolume, cls: u8) -> Vec<bool> {
    v.data().iter().map(|&l| l == cls).collect()
}

pub fn surface_mask(mask: &[bool], shape: Shape3) -> Vec<bool> {
    let [d, h, w] = shape.dims();
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = shape.index(z, y, x);
                if !mask[i] {
                    continue;
                }
                out[i] = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !mask[i - h * w]
                    || !mask[i + h * w]
                    || !mask[i - w]
                    || !mask[i + w]
                    || !mask[i - 1]
                    || !mask[i + 1];
            }
        }
    }
    out
}

pub fn surface_set(v: &LabelVolume, cls: u8) -> SurfaceSet {
    let shape = v.shape();
    let sp = v.spacing().as_array();
    let surf = surface_mask(&class_mask(v, cls), shape);
    let indices: Vec<usize> = (0..surf.len()).filter(|&i| surf[i]).collect();
    let points = indices
        .iter()
        .map(|&i| {
            let (z, y, x) = shape.coords(i);
            [z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]]
        })
        .collect();
    SurfaceSet { indices, points }
}

/// One pass of the lower-envelope transform along a line with sample pitch
/// `step`: `out[i] = min_j ((i - j) step)^2 + f[j]`.
fn envelope_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    let n = f.len();
    let s2 = step * step;
    v.clear();
    zs.clear();
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                zs.push(f64::NEG_INFINITY);
                break;
            };
            let qf = q as f64;
            let pf = p as f64;
            let s = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            if s <= *zs.last().expect("paired with v") {
                v.pop();
                zs.pop();
            } else {
                v.push(q);
                zs.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && zs[k + 1] < qf {
            k += 1;
        }
        let d = (qf - v[k] as f64) * step;
        *slot = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance in mm^2 from every voxel to the nearest site.
/// Voxels are infinite when there are no sites.
pub fn squared_distance_transform(sites: &[bool], shape: Shape3, spacing: Spacing3) -> Vec<f64> {
    let mut field: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let dims = shape.dims();
    let strides = [shape.h * shape.w, shape.w, 1];
    let sp = spacing.as_array();
    let (mut line, mut out, mut v, mut zs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    // innermost axis first; the result does not depend on the order
    for axis in (0..3).rev() {
        let n = dims[axis];
        let stride = strides[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for start in 0..field.len() {
            let (z, y, x) = shape.coords(start);
            if [z, y, x][axis] != 0 {
                continue;
            }
            for k in 0..n {
                line[k] = field[start + k * stride];
            }
            envelope_1d(&line, sp[axis], &mut out, &mut v, &mut zs);
            for k in 0..n {
                field[start + k * stride] = out[k];
            }
        }
    }
    field
}

pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<f64> {
    check(pred, gt)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (ip, ig) = (p == cls, g == cls);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    })
}

/// Directed surface distances in mm: from each pred surface voxel to the gt
/// surface, and from each gt surface voxel to the pred surface.
pub fn surface_distances(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<(Vec<f64>, Vec<f64>)> {
    check(pred, gt)?;
    let shape = pred.shape();
    let sp = pred.spacing();
    let sp_mask = surface_mask(&class_mask(pred, cls), shape);
    let sg_mask = surface_mask(&class_mask(gt, cls), shape);
    if !sp_mask.contains(&true) || !sg_mask.contains(&true) {
        return Err(Error::UndefinedSurface(cls as usize));
    }
    let to_gt = squared_distance_transform(&sg_mask, shape, sp);
    let to_pred = squared_distance_transform(&sp_mask, shape, sp);
    let collect = |mask: &[bool], field: &[f64]| -> Vec<f64> {
        mask.iter()
            .zip(field)
            .filter(|(m, _)| **m)
            .map(|(_, d2)| d2.sqrt())
            .collect()
    };
    Ok((collect(&sp_mask, &to_gt), collect(&sg_mask, &to_pred)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn asd(pred: &LabelVolume, gt: &LabelVolume, cls: u8) -> Result<f64> {
    let (a, b) = surface_distances(pred, gt, cls)?;
    Ok((mean(&a) + mean(&b)) / 2.0)
}

/// Distance-within-tolerance test shared by every NSD computation. The
/// relative slack absorbs rounding when a distance equals the tolerance.
pub fn within_tolerance(d: f64, tol_mm: f64) -> bool {
    d <= tol_mm * (1.0 + 1e-12)
}

pub fn nsd(pred: &LabelVolume, gt: &LabelVolume, cls: u8, tol_mm: f64) -> Result<f64> {
    if !(tol_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol_mm} must be positive")));
    }
    let (a, b) = surface_distances(pred, gt, cls)?;
    let hits = a.iter().chain(&b).filter(|&&d| within_tolerance(d, tol_mm)).count();
    Ok(hits as f64 / (a.len() + b.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub dsc: f64,
    /// Missing when either surface is empty.
    pub nsd: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tolerance_mm: f64,
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: Option<f64>,
    pub mean_nsd: Option<f64>,
    pub mean_asd: Option<f64>,
}

fn mean_of(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = vals.collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Scores every foreground class present in either volume.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, tol_mm: f64) -> Result<MetricReport> {
    check(pred, gt)?;
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::ClassMismatch(pred.num_classes(), gt.num_classes()));
    }
    let (pc, gc) = (pred.class_counts(), gt.class_counts());
    let mut per_class = Vec::new();
    for cls in 1..gt.num_classes() {
        if pc[cls] == 0 && gc[cls] == 0 {
            continue;
        }
        let c = cls as u8;
        let (nsd_v, asd_v) = if pc[cls] > 0 && gc[cls] > 0 {
            let (a, b) = surface_distances(pred, gt, c)?;
            let hits = a.iter().chain(&b).filter(|&&d| within_tolerance(d, tol_mm)).count();
            (
                Some(hits as f64 / (a.len() + b.len()) as f64),
                Some((mean(&a) + mean(&b)) / 2.0),
            )
        } else {
            (None, None)
        };
        per_class.push(ClassMetrics {
            class: c,
            dsc: dsc(pred, gt, c)?,
            nsd: nsd_v,
            asd: asd_v,
        });
    }
    Ok(MetricReport {
        tolerance_mm: tol_mm,
        mean_dsc: mean_of(per_class.iter().map(|c| c.dsc)),
        mean_nsd: mean_of(per_class.iter().filter_map(|c| c.nsd)),
        mean_asd: mean_of(per_class.iter().filter_map(|c| c.asd)),
        per_class,
    })
}

/// Averages several reports class by class.
pub fn average_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports.first().ok_or(Error::Empty("metric reports"))?;
    let max_class = reports
        .iter()
        .flat_map(|r| r.per_class.iter().map(|c| c.class))
        .max()
        .unwrap_or(0);
    let mut per_class = Vec::new();
    for cls in 1..=max_class {
        let rows: Vec<&ClassMetrics> = reports
            .iter()
            .flat_map(|r| r.per_class.iter().filter(move |c| c.class == cls))
            .collect();
        if rows.is_empty() {
            continue;
        }
        per_class.push(ClassMetrics {
            class: cls,
            dsc: mean(&rows.iter().map(|c| c.dsc).collect::<Vec<_>>()),
            nsd: mean_of(rows.iter().filter_map(|c| c.nsd)),
            asd: mean_of(rows.iter().filter_map(|c| c.asd)),
        });
    }
    Ok(MetricReport {
        tolerance_mm: first.tolerance_mm,
        mean_dsc: mean_of(reports.iter().filter_map(|r| r.mean_dsc)),
        mean_nsd: mean_of(reports.iter().filter_map(|r| r.mean_nsd)),
        mean_asd: mean_of(reports.iter().filter_map(|r| r.mean_asd)),
        per_class,
    })
}
