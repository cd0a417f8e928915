//! Homology-aware train/validation splitting.
//!
//! Proteins are clustered greedily by an alignment-free identity proxy
//! (Jaccard similarity of k-mer sets), then whole clusters are assigned to
//! train or validation; no cluster straddles the split.
//! Clusters produced by an external tool can be imported instead via
//! [`clusters_from_tsv`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MutationRecord;
use crate::error::{Error, Result};

pub const DEFAULT_KMER: usize = 5;
pub const DEFAULT_IDENTITY: f64 = 0.5;

/// A protein to be clustered, with its mutation count used for balancing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protein {
    pub id: String,
    pub sequence: String,
    pub mutations: usize,
}

/// Distinct proteins of a dataset, ordered by id.
pub fn proteins_from_records(records: &[MutationRecord]) -> Vec<Protein> {
    let mut map: BTreeMap<&str, Protein> = BTreeMap::new();
    for r in records {
        map.entry(&r.protein_id)
            .or_insert_with(|| Protein {
                id: r.protein_id.clone(),
                sequence: r.wt_sequence.clone(),
                mutations: 0,
            })
            .mutations += 1;
    }
    map.into_values().collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub representative: String,
    /// Sorted member ids, representative included.
    pub members: Vec<String>,
}

fn kmers(seq: &str, k: usize) -> HashSet<&[u8]> {
    let b = seq.as_bytes();
    if b.len() < k {
        return HashSet::from([b]);
    }
    b.windows(k).collect()
}

/// Jaccard similarity of the k-mer sets of two sequences. Sequences shorter
/// than `k` contribute themselves as a single k-mer.
pub fn estimate_identity(a: &str, b: &str, k: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("identity of an empty sequence"));
    }
    if k == 0 {
        return Err(Error::config("k-mer size must be positive"));
    }
    let (ka, kb) = (kmers(a, k), kmers(b, k));
    let inter = ka.intersection(&kb).count();
    let union = ka.len() + kb.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Greedy clustering: proteins are visited by descending length (ties by
/// id); each joins the first cluster whose representative reaches
/// `threshold` identity, or founds a new one.
pub fn greedy_cluster(proteins: &[Protein], threshold: f64, k: usize) -> Result<Vec<Cluster>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!("identity threshold {threshold} must lie in (0, 1]")));
    }
    let mut seen = HashSet::new();
    for p in proteins {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::data(format!("protein '{}' listed twice", p.id)));
        }
    }
    let mut order: Vec<&Protein> = proteins.iter().collect();
    order.sort_by(|a, b| b.sequence.len().cmp(&a.sequence.len()).then_with(|| a.id.cmp(&b.id)));

    let mut reps: Vec<&Protein> = Vec::new();
    let mut members: Vec<Vec<String>> = Vec::new();
    for p in order {
        let mut home = None;
        for (c, rep) in reps.iter().enumerate() {
            if estimate_identity(&rep.sequence, &p.sequence, k)? >= threshold {
                home = Some(c);
                break;
            }
        }
        match home {
            Some(c) => members[c].push(p.id.clone()),
            None => {
                reps.push(p);
                members.push(vec![p.id.clone()]);
            }
        }
    }
    Ok(reps
        .into_iter()
        .zip(members)
        .map(|(rep, mut m)| {
            m.sort();
            Cluster {
                representative: rep.id.clone(),
                members: m,
            }
        })
        .collect())
}

/// Reads a two-column `representative<TAB>member` cluster table, the layout
/// emitted by common sequence-clustering tools.
pub fn clusters_from_tsv(text: &str) -> Result<Vec<Cluster>> {
    let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut owner: BTreeMap<String, String> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(rep), Some(member), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::data(format!("line {}: expected two tab-separated columns", i + 1)));
        };
        for id in [rep, member] {
            if let Some(prev) = owner.insert(id.to_string(), rep.to_string()) {
                if prev != rep {
                    return Err(Error::data(format!(
                        "line {}: '{id}' belongs to clusters '{prev}' and '{rep}'",
                        i + 1
                    )));
                }
            }
        }
        let g = groups.entry(rep.to_string()).or_default();
        g.insert(rep.to_string());
        g.insert(member.to_string());
    }
    Ok(groups
        .into_iter()
        .map(|(representative, members)| Cluster {
            representative,
            members: members.into_iter().collect(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Val,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Train => "train",
            Side::Val => "val",
        })
    }
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Side::Train),
            "val" => Ok(Side::Val),
            _ => Err(Error::data(format!("unknown split side '{s}'"))),
        }
    }
}

/// Train:validation weights, e.g. `8:2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub val: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio { train: 8, val: 2 }
    }
}

impl SplitRatio {
    pub fn val_fraction(&self) -> f64 {
        f64::from(self.val) / f64::from(self.train + self.val)
    }
}

impl FromStr for SplitRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("ratio '{s}' must look like 8:2 with both parts positive"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let train: u32 = a.trim().parse().map_err(|_| bad())?;
        let val: u32 = b.trim().parse().map_err(|_| bad())?;
        if train == 0 || val == 0 {
            return Err(bad());
        }
        Ok(SplitRatio { train, val })
    }
}

impl fmt::Display for SplitRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.train, self.val)
    }
}

/// Per-protein side assignment plus the cluster each protein belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub threshold: f64,
    pub ratio: SplitRatio,
    /// protein id -> (side, cluster representative)
    pub entries: BTreeMap<String, (Side, String)>,
}

impl SplitAssignment {
    pub fn side(&self, protein_id: &str) -> Option<Side> {
        self.entries.get(protein_id).map(|(s, _)| *s)
    }

    pub fn proteins_on(&self, side: Side) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, (s, _))| *s == side)
            .map(|(id, _)| id.as_str())
    }

    /// Manifest text: a comment line with the split parameters, a header,
    /// then one `protein_id<TAB>side<TAB>representative` row per protein in
    /// id order.
    pub fn to_manifest(&self) -> String {
        let mut out = format!(
            "# seed={} identity={} ratio={}\nprotein_id\tassignment\trepresentative\n",
            self.seed, self.threshold, self.ratio
        );
        for (id, (side, rep)) in &self.entries {
            out.push_str(&format!("{id}\t{side}\t{rep}\n"));
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut seed = 0;
        let mut threshold = DEFAULT_IDENTITY;
        let mut ratio = SplitRatio::default();
        let mut entries = BTreeMap::new();
        let mut header_seen = false;
        for (i, line) in lines.by_ref() {
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("seed", v)) => seed = v.parse().map_err(|_| Error::data(format!("line {}: bad seed", i + 1)))?,
                        Some(("identity", v)) => threshold = v.parse().map_err(|_| Error::data(format!("line {}: bad identity", i + 1)))?,
                        Some(("ratio", v)) => ratio = v.parse()?,
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                if line != "protein_id\tassignment\trepresentative" {
                    return Err(Error::data(format!("line {}: unexpected manifest header '{line}'", i + 1)));
                }
                header_seen = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, side, rep] = cols[..] else {
                return Err(Error::data(format!("line {}: expected three columns", i + 1)));
            };
            let side: Side = side.parse().map_err(|e| Error::data(format!("line {}: {e}", i + 1)))?;
            if entries.insert(id.to_string(), (side, rep.to_string())).is_some() {
                return Err(Error::data(format!("line {}: protein '{id}' listed twice", i + 1)));
            }
        }
        if !header_seen {
            return Err(Error::data("split manifest has no header"));
        }
        Ok(SplitAssignment {
            seed,
            threshold,
            ratio,
            entries,
        })
    }
}

/// Shuffles clusters with a seeded generator, then assigns each whole
/// cluster to whichever side brings the validation mutation count closer to
/// its target share.
pub fn split_clusters(
    clusters: &[Cluster],
    proteins: &[Protein],
    ratio: SplitRatio,
    seed: u64,
    threshold: f64,
) -> Result<SplitAssignment> {
    let counts: BTreeMap<&str, usize> = proteins.iter().map(|p| (p.id.as_str(), p.mutations)).collect();
    let mut covered = HashSet::new();
    for c in clusters {
        if !c.members.contains(&c.representative) {
            return Err(Error::data(format!("cluster '{}' does not contain its representative", c.representative)));
        }
        for m in &c.members {
            if !counts.contains_key(m.as_str()) {
                return Err(Error::data(format!("clustered protein '{m}' is not in the dataset")));
            }
            if !covered.insert(m.as_str()) {
                return Err(Error::data(format!("protein '{m}' appears in two clusters")));
            }
        }
    }
    if let Some(p) = proteins.iter().find(|p| !covered.contains(p.id.as_str())) {
        return Err(Error::data(format!("protein '{}' is not in any cluster", p.id)));
    }

    let mut order: Vec<&Cluster> = clusters.iter().collect();
    order.sort_by(|a, b| a.representative.cmp(&b.representative));
    let size = |c: &Cluster| c.members.iter().map(|m| counts[m.as_str()]).sum::<usize>();

    let mut val_side: HashSet<&str> = HashSet::new();
    if order.len() < 2 {
        log::warn!("only {} cluster(s); assigning everything to train", order.len());
    } else {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let total: usize = order.iter().map(|c| size(c)).sum();
        let target = total as f64 * ratio.val_fraction();
        let mut val = 0usize;
        for c in &order {
            let n = size(c);
            if ((val + n) as f64 - target).abs() < (val as f64 - target).abs() {
                val += n;
                val_side.insert(c.representative.as_str());
            }
        }
    }

    let mut entries = BTreeMap::new();
    for c in clusters {
        let side = if val_side.contains(c.representative.as_str()) {
            Side::Val
        } else {
            Side::Train
        };
        for m in &c.members {
            entries.insert(m.clone(), (side, c.representative.clone()));
        }
    }
    Ok(SplitAssignment {
        seed,
        threshold,
        ratio,
        entries,
    })
}

/// Clusters a dataset's proteins and splits the clusters.
pub fn prepare_split(records: &[MutationRecord], threshold: f64, k: usize, ratio: SplitRatio, seed: u64) -> Result<SplitAssignment> {
    let proteins = proteins_from_records(records);
    let clusters = greedy_cluster(&proteins, threshold, k)?;
    split_clusters(&clusters, &proteins, ratio, seed, threshold)
}

/// Train and validation records under `split`. Every protein must be listed.
pub fn partition_records(records: &[MutationRecord], split: &SplitAssignment) -> Result<(Vec<MutationRecord>, Vec<MutationRecord>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for r in records {
        match split.side(&r.protein_id) {
            Some(Side::Train) => train.push(r.clone()),
            Some(Side::Val) => val.push(r.clone()),
            None => return Err(Error::data(format!("protein '{}' is missing from the split manifest", r.protein_id))),
        }
    }
    Ok((train, val))
}
