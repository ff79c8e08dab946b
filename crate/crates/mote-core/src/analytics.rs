//! Routing analytics: who goes where, and does it differ by modality.
//!
//! Everything works off a [`RoutingTrace`]: the per-layer gate records of
//! one forward pass zipped with per-token modality tags. Statistics stay
//! plain `Vec<f64>` so they can be asserted against by hand; exports write
//! CSV with full-precision floats, a JSON report, and an SVG scatter of
//! the 2-D principal-component projection of routing behaviour.

use crate::error::{Error, Result};
use crate::model::LayerRouting;
use crate::synthdata::{EncodedBatch, Modality};
use crate::tensor::Matrix;
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const MODALITIES: [Modality; 3] = [Modality::Visual, Modality::Instruction, Modality::Response];

#[derive(Clone, Debug)]
pub struct RoutingTrace {
    pub layers: Vec<LayerRouting>,
    pub modality: Vec<Modality>,
    /// Token index -> example index within the traced batch.
    pub example_of: Vec<usize>,
}

impl RoutingTrace {
    pub fn collect(layers: Vec<LayerRouting>, batch: &EncodedBatch) -> Result<Self> {
        let n = batch.batch.n_tokens();
        if layers.is_empty() {
            return Err(Error::InvalidInput(
                "no routed layers in this forward pass".into(),
            ));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.probs.rows() != n || layer.top1.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} routed {} tokens, batch has {n}",
                    layer.top1.len()
                )));
            }
        }
        if batch.modality.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} modality tags for {n} tokens",
                batch.modality.len()
            )));
        }
        let mut example_of = vec![0; n];
        for e in 0..batch.batch.n_seqs() {
            for t in batch.batch.seq_range(e) {
                example_of[t] = e;
            }
        }
        Ok(RoutingTrace {
            layers,
            modality: batch.modality.clone(),
            example_of,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.modality.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_experts(&self) -> usize {
        self.layers[0].probs.cols()
    }
}

/// Fraction of (optionally modality-filtered) tokens routed to each expert
/// of one layer. Sums to 1; errors if the filter matches nothing.
pub fn expert_load(
    trace: &RoutingTrace,
    layer: usize,
    filter: Option<Modality>,
) -> Result<Vec<f64>> {
    let e = trace.n_experts();
    let mut counts = vec![0.0f64; e];
    let mut total = 0.0;
    for (t, &top) in trace.layers[layer].top1.iter().enumerate() {
        if filter.is_none_or(|m| trace.modality[t] == m) {
            counts[top as usize] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(Error::EmptySelection(format!(
            "no tokens match {filter:?} in layer {layer}"
        )));
    }
    for c in &mut counts {
        *c /= total;
    }
    Ok(counts)
}

/// Per expert of one layer: the distribution over modalities of the tokens
/// it received, ordered visual / instruction / response. Experts that saw
/// no tokens report all zeros.
pub fn modality_mix(trace: &RoutingTrace, layer: usize) -> Vec<[f64; 3]> {
    let mut mix = vec![[0.0f64; 3]; trace.n_experts()];
    for (t, &top) in trace.layers[layer].top1.iter().enumerate() {
        let m = MODALITIES
            .iter()
            .position(|&x| x == trace.modality[t])
            .unwrap();
        mix[top as usize][m] += 1.0;
    }
    for row in &mut mix {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row {
                *v /= total;
            }
        }
    }
    mix
}

/// Total variation distance between two distributions on the same support.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Expert pathways: for each token, the tuple of experts chosen across
/// layers; returned with counts, most common first, lexicographic on ties.
pub fn pathways(trace: &RoutingTrace) -> Vec<(Vec<u32>, usize)> {
    use std::collections::HashMap;
    let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
    for t in 0..trace.n_tokens() {
        let path: Vec<u32> = trace.layers.iter().map(|l| l.top1[t]).collect();
        *counts.entry(path).or_insert(0) += 1;
    }
    let mut out: Vec<(Vec<u32>, usize)> = counts.into_iter().collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn top_pathways(trace: &RoutingTrace, n: usize) -> Vec<(Vec<u32>, usize)> {
    let mut all = pathways(trace);
    all.truncate(n);
    all
}

/// Per-token feature vectors for the projection: gate probabilities of all
/// layers concatenated, n_tokens x (n_layers * n_experts), in f64.
pub fn routing_features(trace: &RoutingTrace) -> Matrix<f64> {
    let (n, l, e) = (trace.n_tokens(), trace.n_layers(), trace.n_experts());
    let mut out = Matrix::zeros(n, l * e);
    for t in 0..n {
        for (li, layer) in trace.layers.iter().enumerate() {
            for i in 0..e {
                out.set(t, li * e + i, layer.probs.get(t, i) as f64);
            }
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(a: &Matrix<f64>) -> (Vec<f64>, Matrix<f64>) {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    let off = |m: &Matrix<f64>| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += m.get(p, q) * m.get(p, q);
            }
        }
        s
    };
    let tol = 1e-24 * (off(&m) + 1.0);
    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eig = (0..n).map(|i| m.get(i, i)).collect();
    (eig, v)
}

#[derive(Clone, Debug, Serialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Row-major: two principal directions.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
}

/// Two-component PCA. The sign of each component is fixed by making its
/// largest-magnitude entry positive (first such entry on ties), so results
/// are reproducible across runs.
pub fn pca2(data: &Matrix<f64>) -> Result<Pca2> {
    let (n, d) = data.shape();
    if n < 2 || d < 2 {
        return Err(Error::InvalidInput(format!(
            "pca needs at least 2x2 data, got {n}x{d}"
        )));
    }
    let mut mean = vec![0.0; d];
    for t in 0..n {
        for j in 0..d {
            mean[j] += data.get(t, j);
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    for t in 0..n {
        for i in 0..d {
            let xi = data.get(t, i) - mean[i];
            for j in i..d {
                let xj = data.get(t, j) - mean[j];
                let c = cov.get(i, j) + xi * xj;
                cov.set(i, j, c);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let c = cov.get(i, j) / (n - 1) as f64;
            cov.set(i, j, c);
            cov.set(j, i, c);
        }
    }
    let (eig, vecs) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap().then(a.cmp(&b)));
    let total: f64 = eig.iter().map(|e| e.max(0.0)).sum();
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut eigenvalues = [0.0; 2];
    for c in 0..2 {
        let col = order[c];
        let mut comp: Vec<f64> = (0..d).map(|r| vecs.get(r, col)).collect();
        let lead = comp
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.abs()
                    .partial_cmp(&b.abs())
                    .unwrap()
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .unwrap();
        if comp[lead] < 0.0 {
            for v in &mut comp {
                *v = -*v;
            }
        }
        eigenvalues[c] = eig[col];
        components[c] = comp;
    }
    let explained = if total > 0.0 {
        [eigenvalues[0] / total, eigenvalues[1] / total]
    } else {
        [0.0, 0.0]
    };
    Ok(Pca2 {
        mean,
        components,
        eigenvalues,
        explained,
    })
}

pub fn project2(data: &Matrix<f64>, pca: &Pca2) -> Vec<(f64, f64)> {
    let (n, d) = data.shape();
    assert_eq!(d, pca.mean.len());
    (0..n)
        .map(|t| {
            let mut x = 0.0;
            let mut y = 0.0;
            for j in 0..d {
                let c = data.get(t, j) - pca.mean[j];
                x += c * pca.components[0][j];
                y += c * pca.components[1][j];
            }
            (x, y)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct PathwayCount {
    pub path: Vec<u32>,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerStats {
    pub load: Vec<f64>,
    pub load_visual: Vec<f64>,
    pub load_instruction: Vec<f64>,
    pub load_response: Vec<f64>,
    /// Total variation distance between visual and response loads.
    pub tv_visual_response: f64,
    pub modality_mix: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyticsReport {
    pub n_tokens: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub layers: Vec<LayerStats>,
    pub top_pathways: Vec<PathwayCount>,
    pub pca_explained: [f64; 2],
}

pub fn build_report(trace: &RoutingTrace) -> Result<AnalyticsReport> {
    let mut layers = Vec::with_capacity(trace.n_layers());
    for l in 0..trace.n_layers() {
        let load = expert_load(trace, l, None)?;
        let load_visual = expert_load(trace, l, Some(Modality::Visual))?;
        let load_instruction = expert_load(trace, l, Some(Modality::Instruction))?;
        let load_response = expert_load(trace, l, Some(Modality::Response))?;
        layers.push(LayerStats {
            tv_visual_response: tv_distance(&load_visual, &load_response),
            load,
            load_visual,
            load_instruction,
            load_response,
            modality_mix: modality_mix(trace, l),
        });
    }
    let pca = pca2(&routing_features(trace))?;
    Ok(AnalyticsReport {
        n_tokens: trace.n_tokens(),
        n_layers: trace.n_layers(),
        n_experts: trace.n_experts(),
        layers,
        top_pathways: top_pathways(trace, 16)
            .into_iter()
            .map(|(path, count)| PathwayCount { path, count })
            .collect(),
        pca_explained: pca.explained,
    })
}

/// Full float precision: 17 significant digits survive a parse round-trip.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-layer expert loads, one row per (layer, slice) pair.
pub fn loads_csv(trace: &RoutingTrace) -> Result<String> {
    let e = trace.n_experts();
    let mut out = String::from("layer,slice");
    for i in 0..e {
        write!(out, ",expert_{i}").unwrap();
    }
    out.push('\n');
    for l in 0..trace.n_layers() {
        let slices: [(&str, Option<Modality>); 4] = [
            ("all", None),
            ("visual", Some(Modality::Visual)),
            ("instruction", Some(Modality::Instruction)),
            ("response", Some(Modality::Response)),
        ];
        for (name, filter) in slices {
            let load = expert_load(trace, l, filter)?;
            write!(out, "{l},{name}").unwrap();
            for v in load {
                write!(out, ",{}", fmt_f64(v)).unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn pathways_csv(trace: &RoutingTrace) -> String {
    let mut out = String::from("pathway,count\n");
    for (path, count) in pathways(trace) {
        let p: Vec<String> = path.iter().map(|e| e.to_string()).collect();
        writeln!(out, "{},{count}", p.join("-")).unwrap();
    }
    out
}

pub fn projection_csv(points: &[(f64, f64)], trace: &RoutingTrace) -> String {
    let mut out = String::from("token,example,modality,x,y\n");
    for (t, &(x, y)) in points.iter().enumerate() {
        writeln!(
            out,
            "{t},{},{:?},{},{}",
            trace.example_of[t],
            trace.modality[t],
            fmt_f64(x),
            fmt_f64(y)
        )
        .unwrap();
    }
    out
}

fn modality_color(m: Modality) -> &'static str {
    match m {
        Modality::Visual => "#1f77b4",
        Modality::Instruction => "#7f7f7f",
        Modality::Response => "#d62728",
    }
}

/// Standalone SVG scatter of the projection, colored by modality.
pub fn projection_svg(points: &[(f64, f64)], trace: &RoutingTrace) -> String {
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if points.is_empty() || !(xmin.is_finite() && ymax.is_finite()) {
        xmin = -1.0;
        xmax = 1.0;
        ymin = -1.0;
        ymax = 1.0;
    }
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">"
    )
    .unwrap();
    writeln!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>"
    )
    .unwrap();
    svg.push_str("<g>\n");
    for (t, &(x, y)) in points.iter().enumerate() {
        let cx = pad + (x - xmin) / xspan * (w - 2.0 * pad);
        let cy = h - pad - (y - ymin) / yspan * (h - 2.0 * pad);
        writeln!(
            svg,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            modality_color(trace.modality[t])
        )
        .unwrap();
    }
    svg.push_str("</g>\n<g font-family=\"sans-serif\" font-size=\"12\">\n");
    for (i, m) in MODALITIES.iter().enumerate() {
        let y = 20.0 + 16.0 * i as f64;
        writeln!(
            svg,
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\"/>",
            w - 110.0,
            y,
            modality_color(*m)
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\">{:?}</text>",
            w - 100.0,
            y + 4.0,
            m
        )
        .unwrap();
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}

/// Writes report.json, loads.csv, pathways.csv, projection.csv and
/// projection.svg into `dir`.
pub fn write_report_files(dir: &Path, trace: &RoutingTrace) -> Result<AnalyticsReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = build_report(trace)?;
    let features = routing_features(trace);
    let pca = pca2(&features)?;
    let points = project2(&features, &pca);
    let files: [(&str, String); 5] = [
        (
            "report.json",
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?,
        ),
        ("loads.csv", loads_csv(trace)?),
        ("pathways.csv", pathways_csv(trace)),
        ("projection.csv", projection_csv(&points, trace)),
        ("projection.svg", projection_svg(&points, trace)),
    ];
    for (name, contents) in files {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}
