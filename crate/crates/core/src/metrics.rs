//! Image AUROC, pooled pixel AUROC, and saturated per-region overlap (sPRO)
//! integrated up to a false-positive-rate limit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::datasets::{ImageSample, Label, RegionMask};
use crate::error::{Result, SpaceError};

pub const DEFAULT_FPR_LIMIT: f64 = 0.05;

/// Probability that an anomalous score exceeds a normal one, ties counted half.
///
/// Computed from midranks; the Mann–Whitney statistic is a sum of
/// half-integers and therefore exact in double precision.
pub fn auroc(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    if normal.is_empty() || anomalous.is_empty() {
        return Err(SpaceError::contract("AUROC needs at least one normal and one anomalous score"));
    }
    if normal.iter().chain(anomalous).any(|v| v.is_nan()) {
        return Err(SpaceError::contract("AUROC scores must not be NaN"));
    }
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(anomalous.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        let positives = all[i..j].iter().filter(|e| e.1).count();
        rank_sum += midrank * positives as f64;
        i = j;
    }
    let na = anomalous.len() as f64;
    let u = rank_sum - na * (na + 1.0) / 2.0;
    Ok(u / (na * normal.len() as f64))
}

/// AUROC over all pixels of all images; region pixels are positive.
pub fn pixel_auroc(items: &[(&[f32], &[bool])]) -> Result<f64> {
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for (map, gt) in items {
        if map.len() != gt.len() {
            return Err(SpaceError::contract("map and mask sizes differ"));
        }
        for (&v, &g) in map.iter().zip(gt.iter()) {
            if g {
                pos.push(v as f64);
            } else {
                neg.push(v as f64);
            }
        }
    }
    auroc(&neg, &pos)
}

/// One image's map with its defect regions and their saturation areas (pixels).
#[derive(Debug, Clone)]
pub struct RegionItem<'a> {
    pub map: &'a [f32],
    pub regions: Vec<&'a RegionMask>,
    pub saturations: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Event {
    Negative,
    Region(usize),
}

/// The sPRO-vs-FPR curve: one `(fpr, mean_spro)` point per distinct threshold,
/// starting at `(0, 0)` above the highest score.
pub fn spro_curve(items: &[RegionItem<'_>]) -> Result<Vec<(f64, f64)>> {
    let mut events: Vec<(f32, Event)> = Vec::new();
    let mut saturation = Vec::new();
    let mut negatives = 0usize;
    for item in items {
        if item.regions.len() != item.saturations.len() {
            return Err(SpaceError::contract("one saturation area per region is required"));
        }
        let mut covered = vec![false; item.map.len()];
        for (region, &sat) in item.regions.iter().zip(&item.saturations) {
            if region.data.len() != item.map.len() {
                return Err(SpaceError::contract("region mask and map sizes differ"));
            }
            let area = region.count();
            if area == 0 {
                continue;
            }
            if !(sat > 0.0) {
                return Err(SpaceError::contract(format!("saturation area must be positive, got {sat}")));
            }
            let r = saturation.len();
            saturation.push(sat.min(area as f64));
            for (i, &inside) in region.data.iter().enumerate() {
                if inside {
                    covered[i] = true;
                    events.push((item.map[i], Event::Region(r)));
                }
            }
        }
        for (i, &c) in covered.iter().enumerate() {
            if !c {
                negatives += 1;
                events.push((item.map[i], Event::Negative));
            }
        }
    }
    if saturation.is_empty() {
        return Err(SpaceError::contract("sPRO needs at least one non-empty region"));
    }
    if negatives == 0 {
        return Err(SpaceError::contract("sPRO needs pixels outside every region"));
    }
    if events.iter().any(|e| e.0.is_nan()) {
        return Err(SpaceError::contract("sPRO maps must not contain NaN"));
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n_regions = saturation.len() as f64;
    let mut detected = vec![0usize; saturation.len()];
    let mut overlap_sum = 0.0f64;
    let mut false_pos = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            match events[i].1 {
                Event::Negative => false_pos += 1,
                Event::Region(r) => {
                    let before = (detected[r] as f64 / saturation[r]).min(1.0);
                    detected[r] += 1;
                    let after = (detected[r] as f64 / saturation[r]).min(1.0);
                    overlap_sum += after - before;
                }
            }
            i += 1;
        }
        curve.push((false_pos as f64 / negatives as f64, overlap_sum / n_regions));
    }
    Ok(curve)
}

/// Trapezoidal area under `curve` for `fpr ∈ [0, limit]`, divided by `limit`.
pub fn area_up_to(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_at = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_at) / 2.0;
            break;
        }
    }
    area / limit
}

pub fn spro_auc(items: &[RegionItem<'_>], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(SpaceError::contract(format!("fpr_limit must lie in (0, 1], got {fpr_limit}")));
    }
    Ok(area_up_to(&spro_curve(items)?, fpr_limit))
}

/// Union of an image's regions, or an all-negative mask when it has none.
pub fn union_mask(sample: &ImageSample) -> Vec<bool> {
    let n = sample.height() * sample.width();
    let mut out = vec![false; n];
    if let Some(regions) = &sample.gt_regions {
        for r in regions {
            let r = r.resize_nearest(sample.height(), sample.width());
            for (o, &v) in out.iter_mut().zip(&r.data) {
                *o |= v;
            }
        }
    }
    out
}

/// Evaluation summary for one category.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub category: String,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub spro: Option<f64>,
    /// Image AUROC of the normal images against each defect type alone.
    pub per_defect_auroc: BTreeMap<String, f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

/// Evaluate image scores and total maps (one per sample, at the sample's
/// resolution). Pixel metrics use only images with ground truth; anomalous
/// images without masks are skipped there.
pub fn evaluate(category: &str, samples: &[ImageSample], scores: &[f32], maps: &[&[f32]], fpr_limit: f64) -> Result<Report> {
    if samples.len() != scores.len() || samples.len() != maps.len() {
        return Err(SpaceError::contract("one score and one map per sample are required"));
    }
    let normal: Vec<f64> = samples
        .iter()
        .zip(scores)
        .filter(|(s, _)| s.label == Label::Normal)
        .map(|(_, &v)| v as f64)
        .collect();
    let anomalous: Vec<f64> = samples
        .iter()
        .zip(scores)
        .filter(|(s, _)| s.label == Label::Anomalous)
        .map(|(_, &v)| v as f64)
        .collect();
    let image_auroc = auroc(&normal, &anomalous).ok();

    let mut per_defect = BTreeMap::new();
    let mut types: Vec<&str> = samples
        .iter()
        .filter(|s| s.label == Label::Anomalous)
        .map(|s| s.defect_type.as_str())
        .collect();
    types.sort_unstable();
    types.dedup();
    for t in types {
        let scores_t: Vec<f64> = samples
            .iter()
            .zip(scores)
            .filter(|(s, _)| s.label == Label::Anomalous && s.defect_type == t)
            .map(|(_, &v)| v as f64)
            .collect();
        if let Ok(a) = auroc(&normal, &scores_t) {
            per_defect.insert(t.to_string(), a);
        }
    }

    let usable: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].label == Label::Normal || samples[i].gt_regions.is_some())
        .collect();
    let masks: Vec<Vec<bool>> = usable.iter().map(|&i| union_mask(&samples[i])).collect();
    let pixel_items: Vec<(&[f32], &[bool])> = usable.iter().zip(&masks).map(|(&i, m)| (maps[i], m.as_slice())).collect();
    let pixel_auroc = pixel_auroc(&pixel_items).ok();

    let resized: Vec<Vec<RegionMask>> = usable
        .iter()
        .map(|&i| {
            let s = &samples[i];
            s.gt_regions
                .as_ref()
                .map(|rs| rs.iter().map(|r| r.resize_nearest(s.height(), s.width())).collect())
                .unwrap_or_default()
        })
        .collect();
    let region_items: Vec<RegionItem> = usable
        .iter()
        .zip(&resized)
        .map(|(&i, rs)| RegionItem {
            map: maps[i],
            regions: rs.iter().collect(),
            saturations: samples[i].region_saturations(),
        })
        .collect();
    let spro = spro_auc(&region_items, fpr_limit).ok();

    Ok(Report {
        category: category.to_string(),
        image_auroc,
        pixel_auroc,
        spro,
        per_defect_auroc: per_defect,
        n_normal: normal.len(),
        n_anomalous: anomalous.len(),
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "nan".to_string())
}

/// `category,metric,value` rows, one report after another, then a mean row
/// per headline metric.
pub fn write_report_csv(path: &Path, reports: &[Report]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| SpaceError::io(path, e))?);
    let mut emit = || -> std::io::Result<()> {
        writeln!(f, "category,metric,value")?;
        for r in reports {
            writeln!(f, "{},image_auroc,{}", r.category, fmt_metric(r.image_auroc))?;
            writeln!(f, "{},pixel_auroc,{}", r.category, fmt_metric(r.pixel_auroc))?;
            writeln!(f, "{},spro,{}", r.category, fmt_metric(r.spro))?;
            for (t, a) in &r.per_defect_auroc {
                writeln!(f, "{},image_auroc:{t},{a:.6}", r.category)?;
            }
        }
        for (name, get) in headline_metrics() {
            writeln!(f, "mean,{name},{}", fmt_metric(mean_of(reports, get)))?;
        }
        f.flush()
    };
    emit().map_err(|e| SpaceError::io(path, e))
}

type Getter = fn(&Report) -> Option<f64>;

fn headline_metrics() -> [(&'static str, Getter); 3] {
    [
        ("image_auroc", |r| r.image_auroc),
        ("pixel_auroc", |r| r.pixel_auroc),
        ("spro", |r| r.spro),
    ]
}

fn mean_of(reports: &[Report], get: Getter) -> Option<f64> {
    let vals: Vec<f64> = reports.iter().filter_map(get).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Human-readable summary table.
pub fn summarize(reports: &[Report]) -> String {
    let pct = |v: Option<f64>| v.map(|x| format!("{:6.2}", 100.0 * x)).unwrap_or_else(|| "   n/a".into());
    let mut out = format!("{:<20} {:>8} {:>8} {:>8}\n", "category", "img-AUC", "pix-AUC", "sPRO");
    for r in reports {
        out.push_str(&format!(
            "{:<20} {:>8} {:>8} {:>8}\n",
            r.category,
            pct(r.image_auroc),
            pct(r.pixel_auroc),
            pct(r.spro)
        ));
        for (t, a) in &r.per_defect_auroc {
            out.push_str(&format!("  {:<18} {:>8}\n", t, pct(Some(*a))));
        }
    }
    if reports.len() > 1 {
        let [a, b, c] = headline_metrics().map(|(_, g)| pct(mean_of(reports, g)));
        out.push_str(&format!("{:<20} {:>8} {:>8} {:>8}\n", "mean", a, b, c));
    }
    out
}
