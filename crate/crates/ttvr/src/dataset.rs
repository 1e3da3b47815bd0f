//! Paired thermal/visible data: manifest ingestion, subject-disjoint splits,
//! color adjustment, batching with on-the-fly degradation, and a procedural
//! toy-face generator.
//!
//! Manifest format (CSV with header, paths relative to the manifest):
//!
//! ```text
//! subject_id,tag,thermal_path,visible_path
//! s000,v00,thermal/s000_v00.png,visible/s000_v00.png
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttvr_core::{
    load_image, make_rng, save_image, ColorSpace, Error, Image, Result, RngStream, Tensor,
};

use crate::nn::images_to_batch;
use crate::turbulence::{
    blur, degrade_random, gaussian_blur_kernel, DegradationParams, KernelSpec, TurbulenceConfig,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub subject_id: String,
    pub tag: String,
    pub thermal_path: PathBuf,
    pub visible_path: PathBuf,
}

impl Record {
    pub fn id(&self) -> String {
        format!("{}/{}", self.subject_id, self.tag)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub records: Vec<Record>,
    pub resolution: usize,
    pub manifest: PathBuf,
}

/// One aligned pair held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub record: Record,
    pub thermal: Image,
    pub visible: Image,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().map(|r| &r.subject_id).collect();
        set.into_iter().cloned().collect()
    }

    /// Records whose subject is in `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> PairedDataset {
        let keep: BTreeSet<&String> = ids.iter().collect();
        PairedDataset {
            records: self
                .records
                .iter()
                .filter(|r| keep.contains(&r.subject_id))
                .cloned()
                .collect(),
            resolution: self.resolution,
            manifest: self.manifest.clone(),
        }
    }

    /// Loads every pair; thermal as grayscale, visible as RGB.
    pub fn load_pairs(&self) -> Result<Vec<Pair>> {
        self.records
            .iter()
            .map(|r| {
                let ingest = |e: Error| Error::Ingestion {
                    record: r.id(),
                    reason: e.to_string(),
                };
                Ok(Pair {
                    record: r.clone(),
                    thermal: load_image(&r.thermal_path).map_err(ingest)?.to_grayscale(),
                    visible: load_image(&r.visible_path).map_err(ingest)?.to_rgb(),
                })
            })
            .collect()
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for r in &self.records {
            let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/");
            w.serialize(Record {
                subject_id: r.subject_id.clone(),
                tag: r.tag.clone(),
                thermal_path: PathBuf::from(rel(&r.thermal_path)),
                visible_path: PathBuf::from(rel(&r.visible_path)),
            })
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Reads and validates a manifest: every file must exist and both modalities
/// of every record must share one resolution. Records are sorted stably by
/// `(subject_id, tag)`.
pub fn load_paired_dataset(manifest: impl AsRef<Path>) -> Result<PairedDataset> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io {
            path: manifest.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => csv_err(manifest, e),
    })?;
    let mut records = Vec::new();
    for row in reader.deserialize::<Record>() {
        let mut r = row.map_err(|e| csv_err(manifest, e))?;
        r.thermal_path = base.join(&r.thermal_path);
        r.visible_path = base.join(&r.visible_path);
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Argument(format!("{} lists no records", manifest.display())));
    }
    records.sort_by(|a, b| (&a.subject_id, &a.tag).cmp(&(&b.subject_id, &b.tag)));
    let mut resolution = None;
    for r in &records {
        let mut dims = Vec::with_capacity(2);
        for (kind, p) in [("thermal", &r.thermal_path), ("visible", &r.visible_path)] {
            if !p.is_file() {
                return Err(Error::Ingestion {
                    record: r.id(),
                    reason: format!("missing {kind} file {}", p.display()),
                });
            }
            let img = load_image(p).map_err(|e| Error::Ingestion {
                record: r.id(),
                reason: format!("unreadable {kind} file: {e}"),
            })?;
            dims.push((img.width(), img.height()));
        }
        let (w, h) = dims[0];
        if dims[1] != dims[0] || w != h {
            return Err(Error::Ingestion {
                record: r.id(),
                reason: format!("thermal {:?} and visible {:?} must be equal squares", dims[0], dims[1]),
            });
        }
        match resolution {
            None => resolution = Some(w),
            Some(res) if res != w => {
                return Err(Error::Ingestion {
                    record: r.id(),
                    reason: format!("resolution {w} differs from dataset resolution {res}"),
                })
            }
            _ => {}
        }
    }
    Ok(PairedDataset {
        records,
        resolution: resolution.expect("non-empty"),
        manifest: manifest.to_path_buf(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl SplitSpec {
    pub fn vis_th(seed: u64) -> Self {
        Self {
            train: 35,
            val: 5,
            test: 10,
            seed,
        }
    }

    pub fn arl_vtf(seed: u64) -> Self {
        Self {
            train: 160,
            val: 40,
            test: 20,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "vis-th" => Ok(Self::vis_th(seed)),
            "arl-vtf" => Ok(Self::arl_vtf(seed)),
            other => Err(Error::Argument(format!("unknown split preset {other:?}"))),
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// The preset counts when `n` matches them exactly, otherwise the same
    /// proportions rescaled to `n` subjects (train and val rounded, test takes
    /// the remainder, each part at least one subject when `n >= 3`).
    pub fn fit_to(&self, n: usize) -> Self {
        if n == self.total() {
            return self.clone();
        }
        let t = self.total() as f64;
        let mut train = ((self.train as f64 / t) * n as f64).round() as usize;
        let mut val = ((self.val as f64 / t) * n as f64).round() as usize;
        if n >= 3 {
            val = val.max(1);
            train = train.clamp(1, n - val - 1);
        } else {
            train = train.min(n);
            val = val.min(n - train);
        }
        Self {
            train,
            val,
            test: n - train - val,
            seed: self.seed,
        }
    }
}

/// Seeded shuffle of the sorted distinct `ids`, partitioned by the spec counts.
pub fn split_ids(ids: &[String], spec: &SplitSpec) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let mut ids: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if spec.total() > ids.len() {
        return Err(Error::Argument(format!(
            "split needs {} subjects but only {} exist",
            spec.total(),
            ids.len()
        )));
    }
    make_rng(spec.seed).fork("split").shuffle(&mut ids);
    let val_end = spec.train + spec.val;
    let test = ids[val_end..val_end + spec.test].to_vec();
    let val = ids[spec.train..val_end].to_vec();
    ids.truncate(spec.train);
    Ok((ids, val, test))
}

pub fn split_subjects(ds: &PairedDataset, spec: &SplitSpec) -> Result<(PairedDataset, PairedDataset, PairedDataset)> {
    let (a, b, c) = split_ids(&ds.subjects(), spec)?;
    Ok((ds.subset(&a), ds.subset(&b), ds.subset(&c)))
}

/// Clips every channel value at the image's 99th percentile (nearest rank)
/// and rescales so that percentile maps to 1.
pub fn color_adjust(img: &Image) -> Image {
    let mut sorted: Vec<f32> = img.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let p = sorted[rank - 1];
    if p <= 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = v.min(p) / p;
    }
    out
}

/// Order of record indices for one epoch.
pub fn epoch_order(n: usize, rng: &RngStream) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.fork("order").shuffle(&mut order);
    order
}

/// Degraded thermal `(B, 1, R, R)` and clean visible `(B, 3, R, R)` batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub thermal: Tensor,
    pub visible: Tensor,
    pub params: Vec<DegradationParams>,
}

/// Degrades the thermal image of each selected pair; sample `k` uses
/// `rng.fork("sample{k}")`.
pub fn assemble_batch(pairs: &[Pair], indices: &[usize], turb: &TurbulenceConfig, rng: &RngStream) -> Result<Batch> {
    let mut thermal = Vec::with_capacity(indices.len());
    let mut visible = Vec::with_capacity(indices.len());
    let mut params = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let pair = &pairs[i];
        let (t, p) = degrade_random(&pair.thermal, turb, &rng.fork(&format!("sample{k}")))?;
        thermal.push(t);
        visible.push(pair.visible.clone());
        params.push(p);
    }
    Ok(Batch {
        indices: indices.to_vec(),
        thermal: images_to_batch(&thermal)?,
        visible: images_to_batch(&visible)?,
        params,
    })
}

/// One epoch of shuffled batches; the incomplete tail batch is dropped.
/// Batch `j` degrades with `rng.fork("batch{j}")`.
pub fn batch_iter<'a>(
    pairs: &'a [Pair],
    turb: &'a TurbulenceConfig,
    batch_size: usize,
    rng: &RngStream,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    let order = epoch_order(pairs.len(), rng);
    let rng = rng.clone();
    let n_batches = if batch_size == 0 { 0 } else { pairs.len() / batch_size };
    (0..n_batches).map(move |j| {
        let idx = &order[j * batch_size..(j + 1) * batch_size];
        assemble_batch(pairs, idx, turb, &rng.fork(&format!("batch{j}")))
    })
}

/// Geometry and coloring that stay fixed for one toy subject.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyIdentity {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub face_w: f64,
    pub face_h: f64,
    pub face_y: f64,
    pub hairline: f64,
    pub eye_dx: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub nose_len: f64,
    pub nose_w: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub lip: [f64; 3],
}

impl ToyIdentity {
    pub fn sample(rng: &mut RngStream) -> Self {
        let mut u = |lo: f64, hi: f64| rng.uniform(lo, hi);
        let tone = u(0.35, 0.85);
        let hair_tone = u(0.05, 0.55);
        Self {
            background: [u(0.1, 0.6), u(0.1, 0.6), u(0.1, 0.6)],
            skin: [(tone + 0.1).min(1.0), tone * 0.8 + 0.05, tone * 0.65],
            hair: [hair_tone, hair_tone * u(0.6, 0.9), hair_tone * u(0.3, 0.7)],
            iris: [u(0.05, 0.4), u(0.1, 0.5), u(0.1, 0.6)],
            face_w: u(0.5, 0.72),
            face_h: u(0.68, 0.88),
            face_y: u(-0.02, 0.1),
            hairline: u(-0.62, -0.3),
            eye_dx: u(0.18, 0.32),
            eye_y: u(-0.22, -0.05),
            eye_r: u(0.06, 0.1),
            nose_len: u(0.12, 0.3),
            nose_w: u(0.04, 0.1),
            mouth_y: u(0.28, 0.5),
            mouth_w: u(0.16, 0.34),
            lip: [u(0.5, 0.8), u(0.15, 0.35), u(0.2, 0.4)],
        }
    }
}

/// Per-image expression, pose and lighting perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyVariation {
    pub shift: (f64, f64),
    pub smile: f64,
    pub mouth_open: f64,
    pub brow_raise: f64,
    pub eye_open: f64,
    pub light: f64,
}

impl ToyVariation {
    pub fn sample(rng: &mut RngStream) -> Self {
        let mut u = |lo: f64, hi: f64| rng.uniform(lo, hi);
        Self {
            shift: (u(-0.03, 0.03), u(-0.03, 0.03)),
            smile: u(-0.06, 0.08),
            mouth_open: u(0.0, 0.04),
            brow_raise: u(0.0, 0.05),
            eye_open: u(0.6, 1.0),
            light: u(-0.12, 0.12),
        }
    }
}

fn smooth_inside(d: f64, edge: f64) -> f64 {
    // 1 inside (d < 0), 0 outside, linear ramp across one pixel.
    (0.5 - d / edge).clamp(0.0, 1.0)
}

fn ellipse_sd(u: f64, v: f64, cx: f64, cy: f64, a: f64, b: f64) -> f64 {
    let (x, y) = ((u - cx) / a, (v - cy) / b);
    ((x * x + y * y).sqrt() - 1.0) * a.min(b)
}

fn mix(dst: &mut [f64; 3], src: [f64; 3], t: f64) {
    for c in 0..3 {
        dst[c] += (src[c] - dst[c]) * t;
    }
}

/// Renders one RGB face; `texture` seeds the fine skin/background texture.
pub fn render_toy_face(id: &ToyIdentity, var: &ToyVariation, res: usize, texture: &mut RngStream) -> Image {
    let edge = 2.0 / res as f64;
    let mut grain: Vec<f64> = (0..res * res).map(|_| texture.normal()).collect();
    grain = crate::turbulence::smooth_plane(&grain, res, res, 0.7);
    let mut out = vec![0.0f32; 3 * res * res];
    let (sx, sy) = var.shift;
    for py in 0..res {
        for px in 0..res {
            let u = (2.0 * (px as f64 + 0.5) / res as f64 - 1.0) - sx;
            let v = (2.0 * (py as f64 + 0.5) / res as f64 - 1.0) - sy;
            let mut c = id.background;
            let fy = id.face_y;
            let hair_cap = smooth_inside(ellipse_sd(u, v, 0.0, fy - 0.06, id.face_w * 1.1, id.face_h * 1.04), edge);
            mix(&mut c, id.hair, hair_cap);
            let face = smooth_inside(ellipse_sd(u, v, 0.0, fy, id.face_w, id.face_h), edge);
            let below_hair = smooth_inside(id.hairline + fy - v, edge);
            mix(&mut c, id.skin, face * below_hair);
            for side in [-1.0, 1.0] {
                let ex = side * id.eye_dx;
                let ey = id.eye_y + fy;
                let white = smooth_inside(ellipse_sd(u, v, ex, ey, id.eye_r * 1.5, id.eye_r * var.eye_open), edge);
                mix(&mut c, [0.92, 0.92, 0.9], white * face);
                let iris = smooth_inside(ellipse_sd(u, v, ex, ey, id.eye_r * 0.6, id.eye_r * 0.6), edge);
                mix(&mut c, id.iris, iris * white);
                let pupil = smooth_inside(ellipse_sd(u, v, ex, ey, id.eye_r * 0.25, id.eye_r * 0.25), edge);
                mix(&mut c, [0.02, 0.02, 0.02], pupil * white);
                let by = ey - id.eye_r * 1.6 - var.brow_raise;
                let brow = smooth_inside(ellipse_sd(u, v, ex, by, id.eye_r * 1.7, id.eye_r * 0.3), edge);
                mix(&mut c, id.hair, brow * face);
            }
            let nose_cy = id.eye_y + fy + 0.08 + id.nose_len / 2.0;
            let nose = smooth_inside(ellipse_sd(u, v, 0.0, nose_cy, id.nose_w, id.nose_len / 2.0), edge);
            let shade = [id.skin[0] * 0.78, id.skin[1] * 0.72, id.skin[2] * 0.7];
            mix(&mut c, shade, nose * face);
            let mx = u / id.mouth_w;
            if mx.abs() <= 1.0 {
                let centre = id.mouth_y + fy - var.smile * (1.0 - mx * mx);
                let half = 0.025 + var.mouth_open * (1.0 - mx * mx);
                let lips = smooth_inside((v - centre).abs() - half, edge);
                mix(&mut c, id.lip, lips * face);
                let inner = smooth_inside((v - centre).abs() - var.mouth_open * (1.0 - mx * mx), edge);
                mix(&mut c, [0.1, 0.03, 0.03], inner * lips * face * (var.mouth_open > 0.005) as u8 as f64);
            }
            let light = 1.0 + var.light * u;
            let g = grain[py * res + px] * 0.03;
            for ch in 0..3 {
                out[ch * res * res + py * res + px] = (c[ch] * light + g).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(Tensor::new(&[3, res, res], out).expect("sized"), ColorSpace::Rgb).expect("rgb")
}

/// The toy visible-to-thermal operator: inverted luma, mild blur, then a
/// sigmoidal contrast curve.
pub fn thermal_surrogate(visible: &Image) -> Image {
    let mut t = visible.to_grayscale();
    for v in t.data_mut() {
        *v = 1.0 - *v;
    }
    let kernel = gaussian_blur_kernel(&KernelSpec::isotropic(5, 0.8)).expect("odd kernel");
    let mut t = blur(&t, &kernel).expect("grayscale blur");
    let k = 2.5f32;
    let norm = (0.5 * k).tanh();
    for v in t.data_mut() {
        *v = (0.5 + 0.5 * (k * (*v - 0.5)).tanh() / norm).clamp(0.0, 1.0);
    }
    t
}

/// Renders `n_subjects × variations` pairs into memory. Subject `s` draws its
/// identity from `rng.fork("subject{s}")`; variation `v` from
/// `rng.fork("subject{s}/var{v}")`.
pub fn toy_pairs(n_subjects: usize, variations: usize, resolution: usize, rng: &RngStream) -> Result<Vec<Pair>> {
    if n_subjects < 2 || variations == 0 || resolution < 8 {
        return Err(Error::Argument(
            "toy dataset needs >= 2 subjects, >= 1 variation and resolution >= 8".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(n_subjects * variations);
    for s in 0..n_subjects {
        let id = ToyIdentity::sample(&mut rng.fork(&format!("subject{s}")));
        for v in 0..variations {
            let vr = rng.fork(&format!("subject{s}/var{v}"));
            let var = ToyVariation::sample(&mut vr.fork("expr"));
            let visible = render_toy_face(&id, &var, resolution, &mut vr.fork("texture"));
            let thermal = thermal_surrogate(&visible);
            let (subject_id, tag) = (format!("s{s:03}"), format!("v{v:02}"));
            let file = format!("{subject_id}_{tag}.png");
            pairs.push(Pair {
                record: Record {
                    subject_id,
                    tag,
                    thermal_path: PathBuf::from("thermal").join(&file),
                    visible_path: PathBuf::from("visible").join(&file),
                },
                thermal,
                visible,
            });
        }
    }
    Ok(pairs)
}

/// Renders the toy dataset into `out_dir` (PNG pairs plus `manifest.csv`).
pub fn make_toy_dataset(
    n_subjects: usize,
    variations: usize,
    resolution: usize,
    rng: &RngStream,
    out_dir: impl AsRef<Path>,
) -> Result<PairedDataset> {
    let out = out_dir.as_ref();
    let pairs = toy_pairs(n_subjects, variations, resolution, rng)?;
    for sub in ["thermal", "visible"] {
        std::fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let mut records = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let mut r = p.record.clone();
        r.thermal_path = out.join(&r.thermal_path);
        r.visible_path = out.join(&r.visible_path);
        save_image(&p.thermal, &r.thermal_path)?;
        save_image(&p.visible, &r.visible_path)?;
        records.push(r);
    }
    let manifest = out.join("manifest.csv");
    let ds = PairedDataset {
        records,
        resolution,
        manifest: manifest.clone(),
    };
    ds.write_manifest(&manifest)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_to_scales_counts() {
        let s = SplitSpec::vis_th(0).fit_to(10);
        assert_eq!((s.train, s.val, s.test), (7, 1, 2));
        let s = SplitSpec::vis_th(0).fit_to(50);
        assert_eq!((s.train, s.val, s.test), (35, 5, 10));
    }

    #[test]
    fn color_adjust_maps_percentile_to_one() {
        let mut data: Vec<f32> = (0..1000).map(|i| 0.5 * i as f32 / 999.0).collect();
        data[980..].iter_mut().for_each(|v| *v = 1.0);
        let img = Image::new(Tensor::new(&[1, 10, 100], data).unwrap(), ColorSpace::Grayscale).unwrap();
        let adj = color_adjust(&img);
        let mut s = adj.data().to_vec();
        s.sort_by(f32::total_cmp);
        assert_eq!(s[989], 1.0);
        let again = color_adjust(&adj);
        assert!(again.tensor().max_abs_diff(adj.tensor()) <= 1e-6);
    }

    #[test]
    fn toy_pairs_are_in_range() {
        let pairs = toy_pairs(2, 2, 32, &make_rng(3)).unwrap();
        assert_eq!(pairs.len(), 4);
        for p in &pairs {
            assert!(p.visible.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(p.thermal.channels(), 1);
        }
    }
}
