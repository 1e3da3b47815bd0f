//! Face verification protocol: one gallery embedding per subject, probe
//! embeddings of reconstructed images, Rank-1 identification and verification
//! rate at fixed false accept rates. Scores are cosine similarities.

use std::collections::{BTreeMap, BTreeSet};

use ttvr_core::{Error, Image, Result};

use crate::dataset::Pair;
use crate::objectives::EmbeddingBackbone;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub subject_id: String,
    /// Record id of the source image.
    pub id: String,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GallerySet {
    entries: Vec<Entry>,
}

impl GallerySet {
    pub fn new(entries: Vec<Entry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.subject_id.as_str()) {
                return Err(Error::Argument(format!("gallery has subject {} twice", e.subject_id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub entries: Vec<Entry>,
}

/// Gallery from the first visible image of each subject (by file name), probes
/// from the reconstructions keyed by record id.
pub fn build_protocol(
    pairs: &[Pair],
    eta: &EmbeddingBackbone,
    reconstructions: &BTreeMap<String, Image>,
) -> Result<(GallerySet, ProbeSet)> {
    eta.ensure_loaded()?;
    let missing: Vec<String> = pairs
        .iter()
        .map(|p| p.record.id())
        .filter(|id| !reconstructions.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Argument(format!("missing reconstructions for: {}", missing.join(", "))));
    }
    let mut first: BTreeMap<&str, &Pair> = BTreeMap::new();
    for p in pairs {
        let name = |q: &Pair| {
            q.record
                .visible_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        };
        first
            .entry(p.record.subject_id.as_str())
            .and_modify(|cur| {
                if (name(p), p.record.id()) < (name(cur), cur.record.id()) {
                    *cur = p;
                }
            })
            .or_insert(p);
    }
    let gallery = first
        .values()
        .map(|p| {
            Ok(Entry {
                subject_id: p.record.subject_id.clone(),
                id: p.record.id(),
                embedding: eta.embed_image(&p.visible.to_rgb())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let probes = pairs
        .iter()
        .map(|p| {
            let id = p.record.id();
            Ok(Entry {
                subject_id: p.record.subject_id.clone(),
                embedding: eta.embed_image(&reconstructions[&id].to_rgb())?,
                id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((GallerySet::new(gallery)?, ProbeSet { entries: probes }))
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Probes × gallery cosine similarities.
pub fn score_matrix(gallery: &GallerySet, probes: &ProbeSet) -> Vec<Vec<f64>> {
    probes
        .entries
        .iter()
        .map(|p| gallery.entries.iter().map(|g| cosine(&p.embedding, &g.embedding)).collect())
        .collect()
}

/// Percentage of probes whose best gallery match is their own subject; ties
/// go to the lowest gallery index.
pub fn rank1(gallery: &GallerySet, probes: &ProbeSet) -> Result<f64> {
    if gallery.is_empty() || probes.entries.is_empty() {
        return Err(Error::Argument("rank-1 needs a non-empty gallery and probe set".into()));
    }
    let scores = score_matrix(gallery, probes);
    let hits = probes
        .entries
        .iter()
        .zip(&scores)
        .filter(|(p, row)| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            gallery.entries[best].subject_id == p.subject_id
        })
        .count();
    Ok(100.0 * hits as f64 / probes.entries.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VrAtFar {
    /// Verification rate in percent.
    pub vr: f64,
    /// Scores strictly above this value are accepted.
    pub threshold: f64,
    pub achieved_far: f64,
    /// The requested rate is below `1/|impostor|`, so no impostor may pass.
    pub saturated: bool,
}

/// Verification rate at the lowest threshold whose impostor accept rate does
/// not exceed `far`.
pub fn vr_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<VrAtFar> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Argument("VR@FAR needs genuine and impostor scores".into()));
    }
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::Argument(format!("FAR must lie in (0, 1), got {far}")));
    }
    let n = impostor.len();
    let mut k = (far * n as f64).floor() as usize;
    while k < n && (k + 1) as f64 / n as f64 <= far {
        k += 1;
    }
    while k > 0 && k as f64 / n as f64 > far {
        k -= 1;
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // At most k impostors may score above the threshold; ties at the
    // threshold are rejected together.
    let threshold = if k >= n { f64::NEG_INFINITY } else { sorted[k] };
    let above = |s: &[f64]| s.iter().filter(|&&v| v > threshold).count();
    Ok(VrAtFar {
        vr: 100.0 * above(genuine) as f64 / genuine.len() as f64,
        threshold,
        achieved_far: above(impostor) as f64 / n as f64,
        saturated: k == 0,
    })
}

/// Genuine (same subject) and impostor scores of every probe against the gallery.
pub fn split_scores(gallery: &GallerySet, probes: &ProbeSet) -> (Vec<f64>, Vec<f64>) {
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for (p, row) in probes.entries.iter().zip(score_matrix(gallery, probes)) {
        for (g, s) in gallery.entries.iter().zip(row) {
            if g.subject_id == p.subject_id {
                gen.push(s);
            } else {
                imp.push(s);
            }
        }
    }
    (gen, imp)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationResult {
    pub rank1: f64,
    pub vr_far1: VrAtFar,
    pub vr_far01: VrAtFar,
    pub scores: Vec<Vec<f64>>,
}

pub fn verify(gallery: &GallerySet, probes: &ProbeSet) -> Result<VerificationResult> {
    let rank1 = rank1(gallery, probes)?;
    let (gen, imp) = split_scores(gallery, probes);
    if gen.is_empty() || imp.is_empty() {
        return Err(Error::Argument(
            "verification needs probes with a gallery subject and at least two subjects".into(),
        ));
    }
    Ok(VerificationResult {
        rank1,
        vr_far1: vr_at_far(&gen, &imp, 0.01)?,
        vr_far01: vr_at_far(&gen, &imp, 0.001)?,
        scores: score_matrix(gallery, probes),
    })
}

impl VerificationResult {
    /// Table with the Rank-1, VR@FAR=1% and VR@FAR=0.1% columns; saturated
    /// rates are marked with `*`.
    pub fn table(&self, label: &str) -> String {
        let mark = |v: &VrAtFar| format!("{:.2}{}", v.vr, if v.saturated { "*" } else { "" });
        let mut s = format!(
            "{:<12} {:>8} {:>12} {:>13}\n{:<12} {:>8.2} {:>12} {:>13}\n",
            "method",
            "Rank-1",
            "VR@FAR=1%",
            "VR@FAR=0.1%",
            label,
            self.rank1,
            mark(&self.vr_far1),
            mark(&self.vr_far01)
        );
        if self.vr_far1.saturated || self.vr_far01.saturated {
            s += "* threshold saturated: fewer impostor scores than 1/FAR\n";
        }
        s
    }

    pub fn scores_csv(&self, gallery: &GallerySet, probes: &ProbeSet) -> String {
        let mut s = String::from("probe,probe_subject");
        for g in gallery.entries() {
            s += &format!(",{}", g.subject_id);
        }
        s.push('\n');
        for (p, row) in probes.entries.iter().zip(&self.scores) {
            s += &format!("{},{}", p.id, p.subject_id);
            for v in row {
                s += &format!(",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}
