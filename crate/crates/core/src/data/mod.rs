//! Mutation records, dataset ingestion, embedding bundles and synthetic data.
//!
//! Mutation positions are 1-based wherever a user sees them ("I4A") and
//! 0-based everywhere else; [`Mutation::index`] is the only bridge.

mod bundle;
mod synth;

pub use bundle::{read_bundles, write_bundles, decode_bundles, encode_bundles, BundleSet, EmbeddingBundle, TrackRole, DTME_MAGIC, DTME_VERSION};
pub use synth::{embed_dataset, synth_dataset, synth_embed, SynthDatasetConfig, TrackSet, Variant};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 20 canonical amino-acid letters in alphabetical order.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Header of the delimited dataset exchange format.
pub const DATASET_HEADER: [&str; 4] = ["protein_id", "wt_sequence", "mutation", "dtm"];

/// One of the 20 canonical residues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AminoAcid(u8);

impl AminoAcid {
    pub fn from_char(c: char) -> Option<Self> {
        u8::try_from(c)
            .ok()
            .filter(|b| AMINO_ACIDS.contains(b))
            .map(AminoAcid)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        AMINO_ACIDS.get(i).copied().map(AminoAcid)
    }

    pub fn as_char(self) -> char {
        self.0 as char
    }

    /// Position in [`AMINO_ACIDS`].
    pub fn index(self) -> usize {
        AMINO_ACIDS.iter().position(|&b| b == self.0).expect("canonical letter")
    }
}

impl fmt::Display for AminoAcid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Checks that `seq` is a non-empty string over the canonical alphabet.
pub fn validate_sequence(seq: &str) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::data("empty sequence"));
    }
    if let Some((i, c)) = seq.char_indices().find(|(_, c)| AminoAcid::from_char(*c).is_none()) {
        return Err(Error::data(format!(
            "non-canonical residue '{c}' at position {}",
            i + 1
        )));
    }
    Ok(())
}

/// A single-point substitution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mutation {
    index: usize,
    pub wild: AminoAcid,
    pub mutant: AminoAcid,
}

impl Mutation {
    /// `position` is 1-based.
    pub fn new(wild: AminoAcid, position: usize, mutant: AminoAcid) -> Result<Self> {
        if position == 0 {
            return Err(Error::data("mutation position must be >= 1"));
        }
        if wild == mutant {
            return Err(Error::data(format!(
                "{wild}{position}{mutant} is not a substitution"
            )));
        }
        Ok(Mutation {
            index: position - 1,
            wild,
            mutant,
        })
    }

    /// 1-based residue position.
    pub fn position(&self) -> usize {
        self.index + 1
    }

    /// 0-based residue index.
    pub fn index(&self) -> usize {
        self.index
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.wild, self.position(), self.mutant)
    }
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(code: &str) -> Result<Self> {
        parse_mutation(code)
    }
}

impl Serialize for Mutation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mutation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_mutation(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses `<wild><position><mutant>`, e.g. `I4A`.
pub fn parse_mutation(code: &str) -> Result<Mutation> {
    let bad = |why: &str| Error::data(format!("invalid mutation code '{code}': {why}"));
    let mut chars = code.chars();
    let first = chars.next().ok_or_else(|| bad("empty"))?;
    let last = chars.next_back().ok_or_else(|| bad("too short"))?;
    let digits = chars.as_str();
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad("expected <letter><digits><letter>"));
    }
    let wild = AminoAcid::from_char(first).ok_or_else(|| bad("non-canonical wild-type letter"))?;
    let mutant = AminoAcid::from_char(last).ok_or_else(|| bad("non-canonical mutant letter"))?;
    let position: usize = digits.parse().map_err(|_| bad("position out of range"))?;
    if position == 0 {
        return Err(bad("position must be >= 1"));
    }
    if wild == mutant {
        return Err(bad("wild-type and mutant residues are identical"));
    }
    Mutation::new(wild, position, mutant)
}

/// Substitutes the mutant residue, checking the wild-type letter first.
pub fn apply_mutation(seq: &str, mutation: &Mutation) -> Result<String> {
    let bytes = seq.as_bytes();
    let i = mutation.index();
    let found = *bytes.get(i).ok_or_else(|| {
        Error::data(format!(
            "mutation {mutation} is out of range for a sequence of length {}",
            bytes.len()
        ))
    })?;
    if found != mutation.wild.as_char() as u8 {
        return Err(Error::data(format!(
            "mutation {mutation}: expected '{}' at position {}, found '{}'",
            mutation.wild,
            mutation.position(),
            found as char
        )));
    }
    let mut out = bytes.to_vec();
    out[i] = mutation.mutant.as_char() as u8;
    Ok(String::from_utf8(out).expect("ascii sequence"))
}

/// One labeled sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MutationRecord {
    pub protein_id: String,
    pub wt_sequence: String,
    pub mutation: Mutation,
    /// Melting-temperature change in degrees Celsius.
    pub dtm: f64,
}

impl MutationRecord {
    pub fn new(protein_id: impl Into<String>, wt_sequence: impl Into<String>, mutation: Mutation, dtm: f64) -> Result<Self> {
        let rec = MutationRecord {
            protein_id: protein_id.into(),
            wt_sequence: wt_sequence.into(),
            mutation,
            dtm,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.protein_id.is_empty() {
            return Err(Error::data("empty protein_id"));
        }
        validate_sequence(&self.wt_sequence)?;
        apply_mutation(&self.wt_sequence, &self.mutation)?;
        if !self.dtm.is_finite() {
            return Err(Error::data(format!("dtm label {} is not finite", self.dtm)));
        }
        Ok(())
    }

    pub fn mutant_sequence(&self) -> String {
        apply_mutation(&self.wt_sequence, &self.mutation).expect("validated record")
    }

    pub fn wt_variant_id(&self) -> String {
        wt_variant_id(&self.protein_id, self.mutation.position())
    }

    pub fn mut_variant_id(&self) -> String {
        mut_variant_id(&self.protein_id, &self.mutation)
    }
}

/// Wild-type bundles carry a position track, so they are keyed by the
/// mutated position as well: `P1:WT@4`. Mutations sharing a site share the
/// wild-type bundle.
pub fn wt_variant_id(protein_id: &str, position: usize) -> String {
    format!("{protein_id}:WT@{position}")
}

pub fn mut_variant_id(protein_id: &str, mutation: &Mutation) -> String {
    format!("{protein_id}:{mutation}")
}

/// Builds records from raw rows, enforcing every record invariant plus
/// dataset-level uniqueness and per-protein sequence consistency.
///
/// This is also the hook for importing other releases: map their columns to
/// `(protein_id, wt_sequence, mutation code, dtm)` and feed them here. Each
/// row carries its 1-based source line for error messages.
pub fn records_from_rows<I>(rows: I) -> Result<Vec<MutationRecord>>
where
    I: IntoIterator<Item = (u64, [String; 4])>,
{
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut sequences: BTreeMap<String, String> = BTreeMap::new();
    for (line, [pid, seq, code, dtm]) in rows {
        let at = |e: Error| Error::data(format!("line {line}: {}", strip_class(&e)));
        let mutation = parse_mutation(code.trim()).map_err(at)?;
        let dtm: f64 = dtm
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("line {line}: dtm '{dtm}' is not a number")))?;
        let rec = MutationRecord::new(pid.trim(), seq.trim(), mutation, dtm).map_err(at)?;
        if let Some(prev) = sequences.get(&rec.protein_id) {
            if *prev != rec.wt_sequence {
                return Err(Error::data(format!(
                    "line {line}: protein '{}' appears with two different wild-type sequences",
                    rec.protein_id
                )));
            }
        } else {
            sequences.insert(rec.protein_id.clone(), rec.wt_sequence.clone());
        }
        if !seen.insert((rec.protein_id.clone(), rec.mutation)) {
            return Err(Error::data(format!(
                "line {line}: duplicate record {} {}",
                rec.protein_id, rec.mutation
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

fn strip_class(e: &Error) -> String {
    match e {
        Error::Data(m) | Error::Config(m) | Error::Numeric(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Parses the delimited dataset format from any reader.
pub fn parse_dataset<R: Read>(reader: R) -> Result<Vec<MutationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::data(format!("line 1: unreadable header: {e}")))?
        .clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != DATASET_HEADER {
        return Err(Error::data(format!(
            "line 1: expected header '{}', found '{}'",
            DATASET_HEADER.join(","),
            got.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::data(format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, [0, 1, 2, 3].map(|i| rec[i].to_string())));
    }
    records_from_rows(rows)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<MutationRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(std::io::BufReader::new(file))
}

/// Writes records in the delimited dataset format.
pub fn write_dataset(path: impl AsRef<Path>, records: &[MutationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("protein_id,wt_sequence,mutation,dtm\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.protein_id, r.wt_sequence, r.mutation, r.dtm));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn aa(c: char) -> AminoAcid {
        AminoAcid::from_char(c).unwrap()
    }

    #[test]
    fn parse_examples() {
        let m = parse_mutation("I4A").unwrap();
        assert_eq!((m.wild, m.position(), m.mutant), (aa('I'), 4, aa('A')));
        assert_eq!(m.index(), 3);
        let m = parse_mutation("A1C").unwrap();
        assert_eq!((m.wild, m.position(), m.mutant), (aa('A'), 1, aa('C')));
    }

    #[test]
    fn parse_rejects_bad_codes() {
        for code in ["I4I", "I0A", "X4A", "I4B", "4A", "IA", "I", "", "i4a", "I4.5A", "I-4A"] {
            let err = parse_mutation(code).unwrap_err();
            assert!(matches!(err, Error::Data(_)), "{code}");
            assert!(err.to_string().contains(&format!("'{code}'")), "{err}");
        }
    }

    #[test]
    fn apply_examples() {
        assert_eq!(apply_mutation("MKIL", &parse_mutation("L4A").unwrap()).unwrap(), "MKIA");
        assert_eq!(apply_mutation("AC", &parse_mutation("A1C").unwrap()).unwrap(), "CC");
        let err = apply_mutation("MKIL", &parse_mutation("I2A").unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 'I'") && msg.contains("found 'K'"), "{msg}");
        assert!(apply_mutation("MKIL", &parse_mutation("L5A").unwrap()).is_err());
    }

    #[test]
    fn load_three_rows() {
        let text = "protein_id,wt_sequence,mutation,dtm\nP1,MKIL,L4A,-2.5\nP1,MKIL,K2E,1.0\nP2,ACDE,D3N,0\n";
        let recs = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].dtm, -2.5);
        assert_eq!(recs[2].mut_variant_id(), "P2:D3N");
        assert_eq!(recs[2].wt_variant_id(), "P2:WT@3");
        assert_eq!(recs[0].wt_variant_id(), "P1:WT@4");
    }

    #[test]
    fn load_rejects_nan_label() {
        let text = "protein_id,wt_sequence,mutation,dtm\nP1,MKIL,L4A,NaN\n";
        let err = parse_dataset(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn load_reports_wild_type_mismatch_line() {
        let text = "protein_id,wt_sequence,mutation,dtm\nP1,MKIL,L4A,1\nP1,MKIL,I2A,1\n";
        let err = parse_dataset(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn load_rejects_duplicates_and_schema() {
        let dup = "protein_id,wt_sequence,mutation,dtm\nP1,MKIL,L4A,1\nP1,MKIL,L4A,2\n";
        assert!(parse_dataset(dup.as_bytes()).unwrap_err().to_string().contains("duplicate"));
        let bad = "id,seq,mut,dtm\nP1,MKIL,L4A,1\n";
        assert!(parse_dataset(bad.as_bytes()).unwrap_err().to_string().contains("header"));
        let conflict = "protein_id,wt_sequence,mutation,dtm\nP1,MKIL,L4A,1\nP1,MKIV,K2A,1\n";
        assert!(parse_dataset(conflict.as_bytes()).is_err());
    }

    fn arb_mutation() -> impl Strategy<Value = Mutation> {
        (0usize..20, 1usize..10_000, 1usize..20).prop_map(|(w, pos, shift)| {
            let wild = AminoAcid::from_index(w).unwrap();
            let mutant = AminoAcid::from_index((w + shift) % 20).unwrap();
            Mutation::new(wild, pos, mutant).unwrap()
        })
    }

    proptest! {
        #[test]
        fn format_then_parse_is_identity(m in arb_mutation()) {
            prop_assert_eq!(parse_mutation(&m.to_string()).unwrap(), m);
        }

        #[test]
        fn apply_changes_exactly_one_residue(seq in "[ACDEFGHIKLMNPQRSTVWY]{1,60}", pos in 0usize..60, shift in 1usize..20) {
            let i = pos % seq.len();
            let wild = AminoAcid::from_char(seq.as_bytes()[i] as char).unwrap();
            let mutant = AminoAcid::from_index((wild.index() + shift) % 20).unwrap();
            let m = Mutation::new(wild, i + 1, mutant).unwrap();
            let out = apply_mutation(&seq, &m).unwrap();
            prop_assert_eq!(out.len(), seq.len());
            let diffs: Vec<usize> = seq.bytes().zip(out.bytes()).enumerate()
                .filter(|(_, (a, b))| a != b).map(|(k, _)| k).collect();
            prop_assert_eq!(diffs, vec![i]);
        }
    }
}
