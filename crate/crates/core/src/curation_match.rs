//! Cross-clip identity grouping and reference/target pairing.
//!
//! Clips are linked by face similarity (single linkage), face groups are split
//! by speaker similarity, and ordered pairs of distinct clips with little
//! transcript overlap become training pairs.

use std::collections::BTreeSet;
use std::path::Path;

use petgraph::unionfind::UnionFind;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::load_tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub face_embedding: Vec<f64>,
    pub speaker_embedding: Vec<f64>,
    pub transcript_tokens: BTreeSet<String>,
}

/// Source of per-clip embeddings; tests use synthetic vectors.
pub trait EmbeddingProvider {
    fn face(&self, clip_id: &str) -> Result<Vec<f64>>;
    fn speaker(&self, clip_id: &str) -> Result<Vec<f64>>;
}

impl ClipRecord {
    pub fn from_provider(clip_id: &str, transcript: &str, provider: &impl EmbeddingProvider) -> Result<Self> {
        Ok(Self {
            clip_id: clip_id.to_string(),
            face_embedding: provider.face(clip_id)?,
            speaker_embedding: provider.speaker(clip_id)?,
            transcript_tokens: tokens(transcript),
        })
    }
}

pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    FaceStage,
    VoiceRefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityGroup {
    pub group_id: usize,
    /// Indices into the clip list, ascending.
    pub members: Vec<usize>,
    pub provenance: Provenance,
    pub singleton: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub tau_face: f64,
    pub tau_voice: f64,
    pub max_overlap: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            tau_face: 0.6,
            tau_voice: 0.7,
            max_overlap: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub reference: String,
    pub target: String,
    pub group_id: usize,
    pub overlap: f64,
}

const UNIT_TOL: f64 = 1e-6;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(clips: &[ClipRecord]) -> Result<()> {
    for c in clips {
        for (kind, e) in [("face", &c.face_embedding), ("speaker", &c.speaker_embedding)] {
            let n = cosine(e, e).sqrt();
            if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::NonUnitEmbedding {
                    id: format!("{}:{kind}", c.clip_id),
                    norm: n,
                });
            }
        }
    }
    Ok(())
}

fn check_tau(name: &str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {tau}")))
    }
}

/// Groups `members` by union-find roots; each group sorted, groups ordered by
/// smallest member.
fn collect(members: &[usize], uf: &UnionFind<usize>) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![];
    let mut root_of: Vec<Option<usize>> = vec![None; members.len()];
    for (i, &m) in members.iter().enumerate() {
        let r = uf.find(i);
        match root_of[r] {
            Some(g) => out[g].push(m),
            None => {
                root_of[r] = Some(out.len());
                out.push(vec![m]);
            }
        }
    }
    for g in &mut out {
        g.sort_unstable();
    }
    out.sort_by_key(|g| g[0]);
    out
}

/// Single-linkage components of `members` under `cos ≥ tau`.
fn linkage(members: &[usize], tau: f64, emb: &dyn Fn(usize) -> Vec<f64>) -> Vec<Vec<usize>> {
    let vecs: Vec<Vec<f64>> = members.iter().map(|&m| emb(m)).collect();
    let mut uf = UnionFind::<usize>::new(members.len());
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            if cosine(&vecs[i], &vecs[j]) >= tau {
                uf.union(i, j);
            }
        }
    }
    collect(members, &uf)
}

pub fn group_by_face(clips: &[ClipRecord], tau_face: f64) -> Result<Vec<IdentityGroup>> {
    check_tau("tau_face", tau_face)?;
    check_unit(clips)?;
    let all: Vec<usize> = (0..clips.len()).collect();
    Ok(linkage(&all, tau_face, &|i| clips[i].face_embedding.clone())
        .into_iter()
        .enumerate()
        .map(|(group_id, members)| IdentityGroup {
            group_id,
            singleton: members.len() == 1,
            members,
            provenance: Provenance::FaceStage,
        })
        .collect())
}

/// Splits one face group into speaker-coherent subgroups. Group ids are local
/// to the call; [`curate`] renumbers them.
pub fn refine_by_voice(group: &IdentityGroup, clips: &[ClipRecord], tau_voice: f64) -> Result<Vec<IdentityGroup>> {
    check_tau("tau_voice", tau_voice)?;
    if let Some(&bad) = group.members.iter().find(|&&m| m >= clips.len()) {
        return Err(Error::Config(format!("group member {bad} outside the clip list")));
    }
    Ok(
        linkage(&group.members, tau_voice, &|i| clips[i].speaker_embedding.clone())
            .into_iter()
            .enumerate()
            .map(|(group_id, members)| IdentityGroup {
                group_id,
                singleton: members.len() == 1,
                members,
                provenance: Provenance::VoiceRefined,
            })
            .collect(),
    )
}

/// Token-set Jaccard index; two empty sets have overlap 0.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn make_training_pairs(groups: &[IdentityGroup], clips: &[ClipRecord], max_overlap: f64) -> Vec<TrainingPair> {
    let mut out = vec![];
    for g in groups {
        for &r in &g.members {
            for &t in &g.members {
                if r == t {
                    continue;
                }
                let overlap = jaccard(&clips[r].transcript_tokens, &clips[t].transcript_tokens);
                if overlap < max_overlap {
                    out.push(TrainingPair {
                        reference: clips[r].clip_id.clone(),
                        target: clips[t].clip_id.clone(),
                        group_id: g.group_id,
                        overlap,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curation {
    pub groups: Vec<IdentityGroup>,
    pub pairs: Vec<TrainingPair>,
}

/// Face grouping, voice refinement and pairing with canonical group ids.
pub fn curate(clips: &[ClipRecord], cfg: &CurationConfig) -> Result<Curation> {
    check_tau("tau_voice", cfg.tau_voice)?;
    let mut groups = vec![];
    for g in group_by_face(clips, cfg.tau_face)? {
        groups.extend(refine_by_voice(&g, clips, cfg.tau_voice)?);
    }
    groups.sort_by_key(|g| g.members[0]);
    for (i, g) in groups.iter_mut().enumerate() {
        g.group_id = i;
    }
    let pairs = make_training_pairs(&groups, clips, cfg.max_overlap);
    Ok(Curation { groups, pairs })
}

/// One line of a clip manifest; embedding paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifestRow {
    pub clip_id: String,
    pub face_embedding: String,
    pub speaker_embedding: String,
    pub transcript: String,
}

pub fn read_clip_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let row: ClipManifestRow = serde_json::from_str(l)?;
            Ok(ClipRecord {
                face_embedding: load_tensor::<f64>(&dir.join(&row.face_embedding))?.data().to_vec(),
                speaker_embedding: load_tensor::<f64>(&dir.join(&row.speaker_embedding))?.data().to_vec(),
                transcript_tokens: tokens(&row.transcript),
                clip_id: row.clip_id,
            })
        })
        .collect()
}

/// Synthetic corpus: `identities × clips_per` clips whose embeddings jitter
/// around per-identity centers; a `dub_rate` fraction of clips gets a foreign
/// speaker embedding.
pub fn synthetic_corpus(identities: usize, clips_per: usize, dim: usize, dub_rate: f64, seed: u64) -> Vec<ClipRecord> {
    let mut r: Rng = rng::stream(seed, &[rng::tag::SCENE, 0xC0]);
    let centers: Vec<(Vec<f64>, Vec<f64>)> = (0..identities)
        .map(|_| (rng::unit_vec(&mut r, dim), rng::unit_vec(&mut r, dim)))
        .collect();
    let jitter = |r: &mut Rng, c: &[f64]| {
        let mut v: Vec<f64> = c.iter().map(|x| x + 0.15 * rng::normal(r)).collect();
        let n = cosine(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    };
    let vocab = 40;
    let mut out = vec![];
    for (id, (face, voice)) in centers.iter().enumerate() {
        for c in 0..clips_per {
            let speaker = if r.random::<f64>() < dub_rate {
                rng::unit_vec(&mut r, dim)
            } else {
                jitter(&mut r, voice)
            };
            let words = (0..6).map(|_| format!("w{}", r.random_range(0..vocab))).collect();
            out.push(ClipRecord {
                clip_id: format!("id{id:02}_clip{c:02}"),
                face_embedding: jitter(&mut r, face),
                speaker_embedding: speaker,
                transcript_tokens: words,
            });
        }
    }
    out
}
