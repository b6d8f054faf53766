//! Edge (EPR) and orientation (OPR) precision/recall with ODS, OIS and AP.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::occlusion::{wrap_angle, EdgeMap, OrientationMap};

/// Matching tolerance as a fraction of the image diagonal.
pub const DEFAULT_TOLERANCE_FRACTION: f64 = 0.0075;
/// Largest angular error for a matched pixel to count in OPR.
pub const ORIENTATION_TOLERANCE: f64 = PI / 2.0;
pub const DEFAULT_THRESHOLDS: usize = 99;

/// `n` thresholds evenly spaced strictly inside `(0, 1)`.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

// Neighbour offsets in the order E, NE, N, NW, W, SW, S, SE (rows grow down).
const RING: [(i64, i64); 8] = [(1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1)];

fn ring(m: &[bool], w: usize, h: usize, x: usize, y: usize) -> [bool; 8] {
    RING.map(|(dx, dy)| {
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && m[ny as usize * w + nx as usize]
    })
}

/// Yokoi connectivity number for 8-connected foreground: the number of
/// foreground components a pixel joins. Removing a pixel with value 1 keeps
/// the topology.
fn connectivity8(n: &[bool; 8]) -> usize {
    (0..4)
        .map(|i| {
            let k = 2 * i;
            let off = |j: usize| !n[(k + j) % 8];
            usize::from(off(0)) - usize::from(off(0) && off(1) && off(2))
        })
        .sum()
}

/// Topology-preserving thinning of a binary raster to 8-connected curves of
/// width one. Pixels are peeled from the north, south, east and west borders
/// in turn; each deletion re-checks that the pixel is simple and not an end
/// point, so no component is split or removed.
pub fn thin_binary(m: &mut [bool], w: usize, h: usize) {
    // Border direction index into RING: N, S, E, W.
    const SIDES: [usize; 4] = [2, 6, 0, 4];
    loop {
        let mut changed = false;
        for side in SIDES {
            let candidates: Vec<usize> = (0..w * h)
                .filter(|&i| m[i] && !ring(m, w, h, i % w, i / w)[side])
                .collect();
            for i in candidates {
                let n = ring(m, w, h, i % w, i / w);
                let degree = n.iter().filter(|&&b| b).count();
                if degree >= 2 && connectivity8(&n) == 1 {
                    m[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Binarizes at `threshold` (`p >= threshold`) and thins.
pub fn thin(prob: &[f32], width: usize, height: usize, threshold: f64) -> Result<EdgeMap> {
    if prob.len() != width * height {
        return Err(Error::Invalid(format!(
            "probability map has {} values for {width}x{height}",
            prob.len()
        )));
    }
    let mut m: Vec<bool> = prob.iter().map(|&p| f64::from(p) >= threshold).collect();
    thin_binary(&mut m, width, height);
    EdgeMap::from_raw(width, height, m.into_iter().map(u8::from).collect())
}

/// Thins an existing edge map.
pub fn thin_edges(e: &EdgeMap) -> EdgeMap {
    let (w, h) = (e.width(), e.height());
    let mut m: Vec<bool> = e.values().iter().map(|&v| v != 0).collect();
    thin_binary(&mut m, w, h);
    EdgeMap::from_raw(w, h, m.into_iter().map(u8::from).collect()).expect("same extents")
}

/// A one-to-one assignment between predicted and ground-truth pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    /// `(pred index, gt index)` as row-major pixel indices.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Matching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn masks(&self, width: usize, height: usize) -> (EdgeMap, EdgeMap) {
        let mut p = EdgeMap::new(width, height);
        let mut g = EdgeMap::new(width, height);
        for &(a, b) in &self.pairs {
            p.set(a % width, a / width, true);
            g.set(b % width, b / width, true);
        }
        (p, g)
    }
}

struct Arc {
    to: usize,
    cost: f64,
}

/// Maximum-cardinality matching of minimum total distance among pixel pairs
/// at most `d_max` apart. Solved per connected component of the feasibility
/// graph with successive shortest augmenting paths.
pub fn match_boundaries(pred: &EdgeMap, gt: &EdgeMap, d_max: f64) -> Result<Matching> {
    let (w, h) = (pred.width(), pred.height());
    if (gt.width(), gt.height()) != (w, h) {
        return Err(Error::Invalid(format!(
            "prediction is {w}x{h} but ground truth is {}x{}",
            gt.width(),
            gt.height()
        )));
    }
    if !(d_max > 0.0 && d_max.is_finite()) {
        return Err(Error::Invalid(format!("match distance must be positive, got {d_max}")));
    }
    let p_pix: Vec<usize> = (0..w * h).filter(|&i| pred.values()[i] != 0).collect();
    let g_pix: Vec<usize> = (0..w * h).filter(|&i| gt.values()[i] != 0).collect();
    let mut g_slot = vec![usize::MAX; w * h];
    for (k, &i) in g_pix.iter().enumerate() {
        g_slot[i] = k;
    }
    let r = d_max.floor() as i64;
    let mut adj: Vec<Vec<Arc>> = Vec::with_capacity(p_pix.len());
    for &i in &p_pix {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let mut arcs = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let d = ((dx * dx + dy * dy) as f64).sqrt();
                let slot = g_slot[ny as usize * w + nx as usize];
                if d <= d_max && slot != usize::MAX {
                    arcs.push(Arc { to: slot, cost: d });
                }
            }
        }
        adj.push(arcs);
    }

    // Components of the bipartite feasibility graph.
    let (np, ng) = (p_pix.len(), g_pix.len());
    let mut g_adj: Vec<Vec<usize>> = vec![Vec::new(); ng];
    for (p, arcs) in adj.iter().enumerate() {
        for a in arcs {
            g_adj[a.to].push(p);
        }
    }
    let mut comp_p = vec![usize::MAX; np];
    let mut comp_g = vec![usize::MAX; ng];
    let mut components: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for start in 0..np {
        if comp_p[start] != usize::MAX || adj[start].is_empty() {
            continue;
        }
        let id = components.len();
        let (mut ps, mut gs) = (Vec::new(), Vec::new());
        let mut queue = VecDeque::from([(true, start)]);
        comp_p[start] = id;
        while let Some((is_p, v)) = queue.pop_front() {
            if is_p {
                ps.push(v);
                for a in &adj[v] {
                    if comp_g[a.to] == usize::MAX {
                        comp_g[a.to] = id;
                        queue.push_back((false, a.to));
                    }
                }
            } else {
                gs.push(v);
                for &p in &g_adj[v] {
                    if comp_p[p] == usize::MAX {
                        comp_p[p] = id;
                        queue.push_back((true, p));
                    }
                }
            }
        }
        components.push((ps, gs));
    }

    let mut result = Matching::default();
    for (ps, gs) in &components {
        for (p, g, c) in solve_component(ps, gs, &adj) {
            result.pairs.push((p_pix[p], g_pix[g]));
            result.cost += c;
        }
    }
    result.pairs.sort_unstable();
    Ok(result)
}

/// Min-cost maximum matching inside one component via Bellman-Ford
/// shortest augmenting paths on the residual graph.
fn solve_component(ps: &[usize], gs: &[usize], adj: &[Vec<Arc>]) -> Vec<(usize, usize, f64)> {
    // Single-edge components are the common case.
    if ps.len() == 1 && gs.len() == 1 {
        let a = adj[ps[0]].iter().find(|a| a.to == gs[0]).expect("component edge");
        return vec![(ps[0], gs[0], a.cost)];
    }
    let local_g: std::collections::HashMap<usize, usize> = gs.iter().enumerate().map(|(k, &g)| (g, k)).collect();
    let (np, ng) = (ps.len(), gs.len());
    let mut mate_p: Vec<Option<usize>> = vec![None; np];
    let mut mate_g: Vec<Option<usize>> = vec![None; ng];
    let arcs: Vec<Vec<(usize, f64)>> = ps
        .iter()
        .map(|&p| adj[p].iter().map(|a| (local_g[&a.to], a.cost)).collect())
        .collect();
    loop {
        // Distances to pred nodes (from a virtual source feeding free preds)
        // and to gt nodes, over residual arcs: free/unmatched pred -> gt with
        // +cost, matched gt -> its pred with -cost.
        let mut dist_p: Vec<f64> = mate_p.iter().map(|m| if m.is_none() { 0.0 } else { f64::INFINITY }).collect();
        let mut dist_g = vec![f64::INFINITY; ng];
        let mut from_g: Vec<usize> = vec![usize::MAX; ng];
        let mut updated = true;
        let mut rounds = 0;
        while updated && rounds <= np + ng {
            updated = false;
            rounds += 1;
            for p in 0..np {
                if dist_p[p].is_infinite() {
                    continue;
                }
                for &(g, c) in &arcs[p] {
                    if mate_p[p] == Some(g) {
                        continue;
                    }
                    let d = dist_p[p] + c;
                    if d < dist_g[g] - 1e-12 {
                        dist_g[g] = d;
                        from_g[g] = p;
                        updated = true;
                    }
                }
            }
            for g in 0..ng {
                if let Some(p) = mate_g[g] {
                    let c = arcs[p].iter().find(|a| a.0 == g).expect("matched arc").1;
                    let d = dist_g[g] - c;
                    if d < dist_p[p] - 1e-12 {
                        dist_p[p] = d;
                        updated = true;
                    }
                }
            }
        }
        let target = (0..ng)
            .filter(|&g| mate_g[g].is_none() && dist_g[g].is_finite())
            .min_by(|&a, &b| dist_g[a].total_cmp(&dist_g[b]).then(a.cmp(&b)));
        let Some(mut g) = target else { break };
        // Walk back along the augmenting path, flipping matched arcs.
        loop {
            let p = from_g[g];
            let prev = mate_p[p];
            mate_p[p] = Some(g);
            mate_g[g] = Some(p);
            match prev {
                Some(pg) => g = pg,
                None => break,
            }
        }
    }
    mate_p
        .iter()
        .enumerate()
        .filter_map(|(p, m)| {
            m.map(|g| {
                let c = arcs[p].iter().find(|a| a.0 == g).expect("matched arc").1;
                (ps[p], gs[g], c)
            })
        })
        .collect()
}

/// Aggregated counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PrPoint {
    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }

    /// 0 when nothing is predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }

    fn add(&mut self, other: &PrPoint) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
    pub ap: f64,
    pub curve: Vec<PrPoint>,
}

impl EvalSummary {
    pub fn summary_line(&self) -> String {
        format!("ODS={:.4} OIS={:.4} AP={:.4}", self.ods, self.ois, self.ap)
    }

    /// `threshold,precision,recall,f_measure,tp,fp,fn` rows.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f_measure,tp,fp,fn\n");
        for p in &self.curve {
            writeln!(
                s,
                "{:.4},{:.6},{:.6},{:.6},{},{},{}",
                p.threshold,
                p.precision(),
                p.recall(),
                p.f_measure(),
                p.tp,
                p.fp,
                p.fn_
            )
            .expect("string write");
        }
        s
    }

    pub fn write_curve(&self, path: &Path) -> Result<()> {
        fs::write(path, self.curve_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Area under the precision/recall curve: precision made monotone
/// non-increasing in recall, a recall-0 point at the best precision, then
/// trapezoids. Thresholds without predictions are left out.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|p| p.predicted() > 0)
        .map(|p| (p.recall(), p.precision()))
        .collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut best = 0.0f64;
    for pt in pts.iter_mut().rev() {
        best = best.max(pt.1);
        pt.1 = best;
    }
    pts.insert(0, (0.0, best));
    pts.windows(2).map(|s| (s[1].0 - s[0].0) * (s[0].1 + s[1].1) / 2.0).sum()
}

/// Builds a summary from per-image counts, `per_image[i][t]` at `thresholds[t]`.
pub fn summarize(per_image: &[Vec<PrPoint>], thresholds: &[f64]) -> Result<EvalSummary> {
    if thresholds.is_empty() {
        return Err(Error::Invalid("threshold list is empty".into()));
    }
    if per_image.is_empty() {
        return Err(Error::Invalid("no images to evaluate".into()));
    }
    let mut curve: Vec<PrPoint> = thresholds
        .iter()
        .map(|&t| PrPoint {
            threshold: t,
            ..PrPoint::default()
        })
        .collect();
    let mut ois = PrPoint::default();
    for counts in per_image {
        if counts.len() != thresholds.len() {
            return Err(Error::Invalid("per-image counts do not cover every threshold".into()));
        }
        for (acc, c) in curve.iter_mut().zip(counts) {
            acc.add(c);
        }
        // first threshold reaching the image's best F
        let best = counts
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |b, (k, c)| {
                let f = c.f_measure();
                if f > b.1 {
                    (k, f)
                } else {
                    b
                }
            })
            .0;
        ois.add(&counts[best]);
    }
    let (ods_index, ods) = curve
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |b, (k, c)| {
            let f = c.f_measure();
            if f > b.1 {
                (k, f)
            } else {
                b
            }
        });
    Ok(EvalSummary {
        ods,
        ods_threshold: thresholds[ods_index],
        ois: ois.f_measure(),
        ap: average_precision(&curve),
        curve,
    })
}

/// One image to evaluate. `orientation` is required for OPR.
#[derive(Clone, Debug)]
pub struct EvalImage<'a> {
    pub prob: &'a [f32],
    pub orientation: Option<&'a [f32]>,
    pub gt_edges: &'a EdgeMap,
    pub gt_orientation: Option<&'a OrientationMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Matching distance in pixels; `None` uses 0.0075 of the diagonal.
    pub max_distance: Option<f64>,
    pub orientation_tolerance: f64,
    /// Worker threads for per-image matching.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: uniform_thresholds(DEFAULT_THRESHOLDS),
            max_distance: None,
            orientation_tolerance: ORIENTATION_TOLERANCE,
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn distance_for(&self, width: usize, height: usize) -> f64 {
        self.max_distance
            .unwrap_or_else(|| DEFAULT_TOLERANCE_FRACTION * ((width * width + height * height) as f64).sqrt())
    }
}

/// Per-threshold EPR counts, plus OPR counts when orientations are given.
pub type ImageCounts = (Vec<PrPoint>, Option<Vec<PrPoint>>);

/// EPR and OPR counts of one image at every threshold.
pub fn image_counts(img: &EvalImage<'_>, cfg: &EvalConfig) -> Result<ImageCounts> {
    let (w, h) = (img.gt_edges.width(), img.gt_edges.height());
    let d_max = cfg.distance_for(w, h);
    let want_opr = match (img.orientation, img.gt_orientation) {
        (Some(o), Some(go)) => {
            if o.len() != w * h || (go.width(), go.height()) != (w, h) {
                return Err(Error::Invalid("orientation maps do not match the edge map extents".into()));
            }
            true
        }
        _ => false,
    };
    let gt_count = img.gt_edges.count() as u64;
    let mut epr = Vec::with_capacity(cfg.thresholds.len());
    let mut opr = Vec::with_capacity(cfg.thresholds.len());
    for &t in &cfg.thresholds {
        let pred = thin(img.prob, w, h, t)?;
        let m = match_boundaries(&pred, img.gt_edges, d_max)?;
        let predicted = pred.count() as u64;
        let tp = m.len() as u64;
        epr.push(PrPoint {
            threshold: t,
            tp,
            fp: predicted - tp,
            fn_: gt_count - tp,
        });
        if want_opr {
            let (o, go) = (img.orientation.expect("checked"), img.gt_orientation.expect("checked"));
            let good = m
                .pairs
                .iter()
                .filter(|&&(p, g)| {
                    let a = f64::from(o[p]);
                    let b = f64::from(go.values()[g]);
                    wrap_angle(a - b).abs() <= cfg.orientation_tolerance
                })
                .count() as u64;
            opr.push(PrPoint {
                threshold: t,
                tp: good,
                fp: predicted - good,
                fn_: gt_count - good,
            });
        }
    }
    Ok((epr, want_opr.then_some(opr)))
}

/// EPR and (when every image carries orientations) OPR summaries.
pub fn evaluate(images: &[EvalImage<'_>], cfg: &EvalConfig) -> Result<(EvalSummary, Option<EvalSummary>)> {
    if cfg.thresholds.is_empty() {
        return Err(Error::Invalid("threshold list is empty".into()));
    }
    if cfg.thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Invalid("thresholds must be sorted ascending".into()));
    }
    if images.is_empty() {
        return Err(Error::Invalid("no images to evaluate".into()));
    }
    for img in images {
        let (w, h) = (img.gt_edges.width(), img.gt_edges.height());
        if img.prob.len() != w * h {
            return Err(Error::Invalid(format!("probability map does not match {w}x{h} ground truth")));
        }
    }
    let threads = cfg.threads.max(1).min(images.len());
    let mut results: Vec<Option<Result<ImageCounts>>> = (0..images.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, img) in results.iter_mut().zip(images) {
            *slot = Some(image_counts(img, cfg));
        }
    } else {
        let chunk = images.len().div_ceil(threads);
        std::thread::scope(|s| {
            for (slots, imgs) in results.chunks_mut(chunk).zip(images.chunks(chunk)) {
                s.spawn(move || {
                    for (slot, img) in slots.iter_mut().zip(imgs) {
                        *slot = Some(image_counts(img, cfg));
                    }
                });
            }
        });
    }
    let mut epr = Vec::with_capacity(images.len());
    let mut opr = Vec::with_capacity(images.len());
    let mut all_opr = true;
    for r in results {
        let (e, o) = r.expect("every image evaluated")?;
        epr.push(e);
        match o {
            Some(o) => opr.push(o),
            None => all_opr = false,
        }
    }
    let epr = summarize(&epr, &cfg.thresholds)?;
    let opr = if all_opr { Some(summarize(&opr, &cfg.thresholds)?) } else { None };
    Ok((epr, opr))
}

/// Edge-only evaluation.
pub fn epr(images: &[EvalImage<'_>], cfg: &EvalConfig) -> Result<EvalSummary> {
    let stripped: Vec<EvalImage<'_>> = images
        .iter()
        .map(|i| EvalImage {
            orientation: None,
            gt_orientation: None,
            ..i.clone()
        })
        .collect();
    Ok(evaluate(&stripped, cfg)?.0)
}

/// Orientation-aware evaluation; every image must carry both orientation maps.
pub fn opr(images: &[EvalImage<'_>], cfg: &EvalConfig) -> Result<EvalSummary> {
    if images.iter().any(|i| i.orientation.is_none() || i.gt_orientation.is_none()) {
        return Err(Error::Invalid("OPR needs predicted and ground-truth orientations for every image".into()));
    }
    evaluate(images, cfg)?
        .1
        .ok_or_else(|| Error::Invalid("OPR counts missing".into()))
}
