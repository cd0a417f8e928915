//! Deterministic stand-ins for backbone embeddings and labeled datasets,
//! used for desk-scale runs and tests.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{AminoAcid, BundleSet, EmbeddingBundle, Mutation, MutationRecord, TrackRole, AMINO_ACIDS};

/// Which modality tracks a bundle carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TrackSet {
    /// Sequence tracks plus the average-pool track.
    #[serde(rename = "seq")]
    Seq,
    /// Sequence and structure tracks plus the average-pool track.
    #[serde(rename = "seq+struct")]
    SeqStruct,
}

impl TrackSet {
    pub fn roles(self) -> &'static [TrackRole] {
        match self {
            TrackSet::Seq => &[TrackRole::SeqCls, TrackRole::SeqPos, TrackRole::Avg],
            TrackSet::SeqStruct => &TrackRole::ALL,
        }
    }
}

impl std::fmt::Display for TrackSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrackSet::Seq => "seq",
            TrackSet::SeqStruct => "seq+struct",
        })
    }
}

impl std::str::FromStr for TrackSet {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "seq" => Ok(TrackSet::Seq),
            "seq+struct" => Ok(TrackSet::SeqStruct),
            _ => Err(crate::Error::config(format!("unknown track set '{s}', expected seq or seq+struct"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Wt,
    Mut,
}

const POS_WINDOW: usize = 2;
const POS_WEIGHTS: [f32; 2 * POS_WINDOW + 1] = [0.25, 0.5, 1.0, 0.5, 0.25];

fn seeded(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Uniform in [-1, 1), built from the top 24 bits of one draw.
fn unit(rng: &mut ChaCha8Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 23) as f32) - 1.0
}

fn expand(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    (0..d).map(|_| unit(rng)).collect()
}

/// Per-residue table for one role: 20 rows of width `d`.
fn residue_table(seed: u64, role: TrackRole, d: usize) -> Vec<Vec<f32>> {
    let mut rng = seeded(&[b"table", &seed.to_le_bytes(), &[role.tag()]]);
    (0..AMINO_ACIDS.len()).map(|_| expand(&mut rng, d)).collect()
}

fn sequence_hash_noise(seed: u64, role: TrackRole, content: &[u8], d: usize) -> Vec<f32> {
    expand(&mut seeded(&[b"noise", &seed.to_le_bytes(), &[role.tag()], content]), d)
}

fn residue_index(b: u8) -> usize {
    AminoAcid::from_char(b as char).expect("validated sequence").index()
}

fn track_values(seq: &[u8], index: usize, role: TrackRole, d: usize, seed: u64) -> Vec<f32> {
    let table = residue_table(seed, role, d);
    let mut out = vec![0.0f32; d];
    match role {
        TrackRole::SeqCls | TrackRole::StructCls | TrackRole::Avg => {
            let inv = 1.0 / seq.len() as f32;
            for &b in seq {
                for (o, t) in out.iter_mut().zip(&table[residue_index(b)]) {
                    *o += t * inv;
                }
            }
            if role != TrackRole::Avg {
                let noise = sequence_hash_noise(seed, role, seq, d);
                for (o, n) in out.iter_mut().zip(noise) {
                    *o += 0.1 * n;
                }
            }
        }
        TrackRole::SeqPos | TrackRole::StructPos => {
            let lo = index.saturating_sub(POS_WINDOW);
            let hi = (index + POS_WINDOW + 1).min(seq.len());
            for (k, &b) in seq[lo..hi].iter().enumerate() {
                let w = POS_WEIGHTS[k + lo + POS_WINDOW - index];
                for (o, t) in out.iter_mut().zip(&table[residue_index(b)]) {
                    *o += w * t;
                }
            }
            let noise = sequence_hash_noise(seed, role, &seq[lo..hi], d);
            for (o, n) in out.iter_mut().zip(noise) {
                *o += 0.25 * n;
            }
        }
    }
    out
}

/// Synthesizes an embedding bundle for the wild-type or mutant variant of a
/// record. A pure function of the variant's sequence content, the mutated
/// position, the track roles, `d_raw` and `seed`.
pub fn synth_embed(
    record: &MutationRecord,
    variant: Variant,
    tracks: TrackSet,
    d_raw: usize,
    seed: u64,
) -> EmbeddingBundle {
    let (id, seq) = match variant {
        Variant::Wt => (record.wt_variant_id(), record.wt_sequence.clone()),
        Variant::Mut => (record.mut_variant_id(), record.mutant_sequence()),
    };
    let mut bundle = EmbeddingBundle::new(id);
    for &role in tracks.roles() {
        let values = track_values(seq.as_bytes(), record.mutation.index(), role, d_raw, seed);
        bundle.tracks.insert(role, values);
    }
    bundle
}

/// Wild-type and mutant bundles for every record. Records sharing a
/// wild-type variant id share one bundle.
pub fn embed_dataset(records: &[MutationRecord], tracks: TrackSet, d_raw: usize, seed: u64) -> crate::Result<BundleSet> {
    if d_raw == 0 {
        return Err(crate::Error::config("d_raw must be positive"));
    }
    let mut out = BundleSet::new();
    for r in records {
        if !out.contains_key(&r.wt_variant_id()) {
            let b = synth_embed(r, Variant::Wt, tracks, d_raw, seed);
            out.insert(b.variant_id.clone(), b);
        }
        let b = synth_embed(r, Variant::Mut, tracks, d_raw, seed);
        out.insert(b.variant_id.clone(), b);
    }
    Ok(out)
}

/// Parameters for [`synth_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDatasetConfig {
    pub proteins: usize,
    pub mutations_per_protein: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of proteins generated as near-copies (about 3% substitutions)
    /// of an earlier protein.
    pub homolog_fraction: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        SynthDatasetConfig {
            proteins: 20,
            mutations_per_protein: 5,
            min_len: 40,
            max_len: 120,
            homolog_fraction: 0.2,
            label_noise: 1.0,
            seed: 0,
        }
    }
}

// Kyte-Doolittle hydropathy in AMINO_ACIDS order.
const HYDROPATHY: [f64; 20] = [
    1.8, 2.5, -3.5, -3.5, 2.8, -0.4, -3.2, 4.5, -3.9, 3.8, 1.9, -3.5, -1.6, -3.5, -4.5, -0.8, -0.7,
    4.2, -0.9, -1.3,
];

fn synthetic_label(seq: &[u8], m: &Mutation) -> f64 {
    let i = m.index();
    let lo = i.saturating_sub(3);
    let hi = (i + 4).min(seq.len());
    let buried = seq[lo..hi]
        .iter()
        .filter(|&&b| HYDROPATHY[residue_index(b)] > 0.0)
        .count() as f64
        / (hi - lo) as f64;
    let delta = HYDROPATHY[m.mutant.index()] - HYDROPATHY[m.wild.index()];
    let proline = if m.mutant.as_char() == 'P' { -2.0 } else { 0.0 };
    -1.0 + 0.6 * delta * (0.25 + buried) + proline
}

/// Generates a labeled dataset of random proteins and single-point
/// mutations. Labels follow a hydropathy-based rule plus Gaussian noise.
pub fn synth_dataset(cfg: &SynthDatasetConfig) -> crate::Result<Vec<MutationRecord>> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(crate::Error::config("need 0 < min_len <= max_len"));
    }
    if cfg.mutations_per_protein > cfg.min_len {
        return Err(crate::Error::config("more mutations per protein than residues"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.label_noise.max(0.0))
        .map_err(|e| crate::Error::config(format!("label noise: {e}")))?;
    let mut sequences: Vec<Vec<u8>> = Vec::with_capacity(cfg.proteins);
    let mut out = Vec::new();
    for p in 0..cfg.proteins {
        let seq: Vec<u8> = if p > 0 && rng.gen_bool(cfg.homolog_fraction.clamp(0.0, 1.0)) {
            let mut s = sequences[rng.gen_range(0..p)].clone();
            for b in s.iter_mut() {
                if rng.gen_bool(0.03) {
                    *b = AMINO_ACIDS[rng.gen_range(0..20)];
                }
            }
            s
        } else {
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            (0..len).map(|_| AMINO_ACIDS[rng.gen_range(0..20)]).collect()
        };
        let seq_str = String::from_utf8(seq.clone()).expect("ascii");
        let mut positions: Vec<usize> = (0..seq.len()).collect();
        for k in 0..cfg.mutations_per_protein {
            let j = rng.gen_range(k..positions.len());
            positions.swap(k, j);
            let i = positions[k];
            let wild = AminoAcid::from_char(seq[i] as char).expect("canonical");
            let mutant = AminoAcid::from_index((wild.index() + rng.gen_range(1..20)) % 20).expect("in range");
            let m = Mutation::new(wild, i + 1, mutant)?;
            let dtm = synthetic_label(&seq, &m) + noise.sample(&mut rng);
            out.push(MutationRecord::new(format!("SYN{p:04}"), seq_str.clone(), m, dtm)?);
        }
        sequences.push(seq);
    }
    Ok(out)
}
