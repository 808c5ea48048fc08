//! On-disk artifact formats: run configuration text, genotype files,
//! checkpoint binaries, run manifests and DOT exports.
//!
//! Text artifacts are line-oriented key=value documents under `[section]`
//! headers; the canonical rendering (sorted sections and keys, exact
//! float formatting) is what gets hashed, so semantically equal configs
//! share a hash regardless of layout. The checkpoint is a little-endian
//! binary with a versioned "PSCK" header carrying every array, optimizer
//! moment, generator state and metric row of a search, which is what
//! makes resume bitwise-exact.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::conv::{ConvConfig, ConvGenotype};
use crate::data::{DatasetConfig, Shape};
use crate::ea::{self, EAKind};
use crate::net::{CellGenotype, CellOp, NetConfig};
use crate::rng::{restore_state, save_state, RngState};
use crate::search::{
    Adam, EvalConfig, MetricLog, MetricRow, SearchConfig, SearchState, Sgd,
};
use crate::tensor::{fmt_g17, Agg, Array};
use crate::conv::Wiring;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const GENOTYPE_HEADER: &str = "pointsea genotype v1";
pub const MANIFEST_HEADER: &str = "pointsea manifest v1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {what}")]
    Parse { line: usize, what: String },
    #[error("bad header {found:?}, expected {expect:?}")]
    Header { found: String, expect: &'static str },
    #[error("unsupported version {found}, expected {expect}")]
    Version { found: u32, expect: u32 },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("config hash {found} does not match expected {expect}")]
    HashMismatch { found: String, expect: String },
    #[error("invalid config: {0}")]
    Config(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("string write");
    }
    out
}

/// Ordered key=value sections of one text document.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigDoc {
    pub sections: Vec<(String, Vec<(String, String)>)>,
}

impl ConfigDoc {
    /// Parses `[section]` headers and `key = value` lines; `#` starts a
    /// comment and blank lines are skipped. Duplicate sections or keys
    /// are errors, as is a key before any section.
    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut doc = ConfigDoc::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(FormatError::Parse { line, what: "empty section name".into() });
                }
                if doc.sections.iter().any(|(n, _)| n == name) {
                    return Err(FormatError::Parse {
                        line,
                        what: format!("duplicate section [{name}]"),
                    });
                }
                doc.sections.push((name.to_string(), Vec::new()));
                continue;
            }
            let Some((key, value)) = t.split_once('=') else {
                return Err(FormatError::Parse {
                    line,
                    what: format!("expected key = value, got {t:?}"),
                });
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            let Some((_, entries)) = doc.sections.last_mut() else {
                return Err(FormatError::Parse {
                    line,
                    what: format!("key {key:?} before any [section]"),
                });
            };
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(FormatError::Parse { line, what: format!("duplicate key {key:?}") });
            }
            entries.push((key, value));
        }
        Ok(doc)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .and_then(|(_, e)| e.iter().find(|(k, _)| k == key))
            .map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, section: &str, key: &str, value: String) {
        match self.sections.iter_mut().find(|(n, _)| n == section) {
            Some((_, entries)) => entries.push((key.to_string(), value)),
            None => self
                .sections
                .push((section.to_string(), vec![(key.to_string(), value)])),
        }
    }

    /// Stable rendering: sections and keys sorted, one blank line between
    /// sections. This is the hashed form.
    pub fn canonical(&self) -> String {
        let mut sections = self.sections.clone();
        sections.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = String::new();
        for (i, (name, entries)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let mut entries = entries.clone();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            writeln!(out, "[{name}]").expect("string write");
            for (k, v) in &entries {
                writeln!(out, "{k} = {v}").expect("string write");
            }
        }
        out
    }
}

fn agg_name(a: Agg) -> &'static str {
    match a {
        Agg::Max => "max",
        Agg::Sum => "sum",
        Agg::Mean => "mean",
    }
}

fn parse_agg(s: &str) -> Result<Agg, String> {
    match s {
        "max" => Ok(Agg::Max),
        "sum" => Ok(Agg::Sum),
        "mean" => Ok(Agg::Mean),
        _ => Err(format!("unknown aggregator {s:?}")),
    }
}

fn wiring_name(w: Wiring) -> &'static str {
    match w {
        Wiring::AllPairs => "all_pairs",
        Wiring::InputsOnly => "inputs_only",
    }
}

fn parse_wiring(s: &str) -> Result<Wiring, String> {
    match s {
        "all_pairs" => Ok(Wiring::AllPairs),
        "inputs_only" => Ok(Wiring::InputsOnly),
        _ => Err(format!("unknown wiring {s:?}")),
    }
}

/// Everything one run needs beyond the seed: the dataset recipe, both
/// network scales, and both training phases. The seed arrives on the
/// command line and is deliberately not part of this document, so one
/// config hash covers a whole seed sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Load this dataset file instead of generating; the file is input
    /// only and never rewritten.
    pub dataset_file: Option<String>,
    /// Farthest-point subsample applied before neighbor indexing.
    pub sample_points: Option<usize>,
    pub conv: ConvConfig,
    pub channels: usize,
    pub search_cells: usize,
    pub search_k: usize,
    pub eval_cells: usize,
    pub eval_k: usize,
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig {
                shapes: vec![Shape::Sphere, Shape::Cylinder, Shape::Torus, Shape::Cone],
                points: 256,
                per_class: 200,
                noise: 0.05,
                seed: 1,
                fractions: (0.6, 0.1, 0.3),
            },
            dataset_file: None,
            sample_points: Some(24),
            conv: ConvConfig::default(),
            channels: 16,
            search_cells: 2,
            search_k: 9,
            eval_cells: 4,
            eval_k: 20,
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(doc: &ConfigDoc, section: &str, key: &str, default: T) -> Result<T, FormatError>
where
    T::Err: std::fmt::Display,
{
    match doc.get(section, key) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|e| {
            FormatError::Config(format!("[{section}] {key} = {v:?}: {e}"))
        }),
    }
}

fn parse_bool(doc: &ConfigDoc, section: &str, key: &str, default: bool) -> Result<bool, FormatError> {
    match doc.get(section, key) {
        None => Ok(default),
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        Some(v) => Err(FormatError::Config(format!(
            "[{section}] {key} = {v:?}: expected true or false"
        ))),
    }
}

impl RunConfig {
    /// Known sections and keys; anything else in the document is an
    /// error so typos fail loudly instead of silently using defaults.
    const KEYS: [(&'static str, &'static [&'static str]); 5] = [
        (
            "dataset",
            &["shapes", "points", "per_class", "noise", "seed", "fractions", "file", "sample_points"],
        ),
        ("conv", &["levels", "nodes", "hidden", "aggregator", "wiring", "ea_subset"]),
        ("net", &["channels", "search_cells", "search_k", "eval_cells", "eval_k"]),
        (
            "search",
            &[
                "epochs", "batch", "w_lr", "w_lr_min", "w_momentum", "w_decay", "r_lr", "r_decay",
                "w_clip",
                "epsilon", "greedy",
            ],
        ),
        ("eval", &["epochs", "batch", "lr", "lr_min", "weight_decay"]),
    ];

    pub fn from_doc(doc: &ConfigDoc) -> Result<Self, FormatError> {
        for (section, entries) in &doc.sections {
            let Some((_, known)) = Self::KEYS.iter().find(|(n, _)| n == section) else {
                return Err(FormatError::Config(format!("unknown section [{section}]")));
            };
            for (key, _) in entries {
                if !known.contains(&key.as_str()) {
                    return Err(FormatError::Config(format!(
                        "unknown key {key:?} in [{section}]"
                    )));
                }
            }
        }

        let base = RunConfig::default();
        let shapes = match doc.get("dataset", "shapes") {
            None => base.dataset.shapes,
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<Vec<Shape>, _>>()
                .map_err(|e| FormatError::Config(format!("[dataset] shapes: {e}")))?,
        };
        let fractions = match doc.get("dataset", "fractions") {
            None => base.dataset.fractions,
            Some(v) => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|e| FormatError::Config(format!("[dataset] fractions: {e}")))?;
                if parts.len() != 3 {
                    return Err(FormatError::Config(
                        "[dataset] fractions needs three comma-separated values".into(),
                    ));
                }
                (parts[0], parts[1], parts[2])
            }
        };
        let ea_subset = match doc.get("conv", "ea_subset") {
            None => base.conv.ea_subset,
            Some(v) => ea::parse_subset(v)
                .map_err(|e| FormatError::Config(format!("[conv] ea_subset: {e}")))?,
        };
        let aggregator = match doc.get("conv", "aggregator") {
            None => base.conv.aggregator,
            Some(v) => parse_agg(v).map_err(FormatError::Config)?,
        };
        let wiring = match doc.get("conv", "wiring") {
            None => base.conv.wiring,
            Some(v) => parse_wiring(v).map_err(FormatError::Config)?,
        };

        let cfg = RunConfig {
            dataset: DatasetConfig {
                shapes,
                points: parse_num(doc, "dataset", "points", base.dataset.points)?,
                per_class: parse_num(doc, "dataset", "per_class", base.dataset.per_class)?,
                noise: parse_num(doc, "dataset", "noise", base.dataset.noise)?,
                seed: parse_num(doc, "dataset", "seed", base.dataset.seed)?,
                fractions,
            },
            dataset_file: doc.get("dataset", "file").map(str::to_string),
            sample_points: match doc.get("dataset", "sample_points") {
                None => base.sample_points,
                Some("none") => None,
                Some(v) => Some(v.parse().map_err(|e| {
                    FormatError::Config(format!("[dataset] sample_points = {v:?}: {e}"))
                })?),
            },
            conv: ConvConfig {
                levels: parse_num(doc, "conv", "levels", base.conv.levels)?,
                nodes: parse_num(doc, "conv", "nodes", base.conv.nodes)?,
                hidden: parse_num(doc, "conv", "hidden", base.conv.hidden)?,
                aggregator,
                ea_subset,
                wiring,
            },
            channels: parse_num(doc, "net", "channels", base.channels)?,
            search_cells: parse_num(doc, "net", "search_cells", base.search_cells)?,
            search_k: parse_num(doc, "net", "search_k", base.search_k)?,
            eval_cells: parse_num(doc, "net", "eval_cells", base.eval_cells)?,
            eval_k: parse_num(doc, "net", "eval_k", base.eval_k)?,
            search: SearchConfig {
                epochs: parse_num(doc, "search", "epochs", base.search.epochs)?,
                batch: parse_num(doc, "search", "batch", base.search.batch)?,
                w_lr: parse_num(doc, "search", "w_lr", base.search.w_lr)?,
                w_lr_min: parse_num(doc, "search", "w_lr_min", base.search.w_lr_min)?,
                w_momentum: parse_num(doc, "search", "w_momentum", base.search.w_momentum)?,
                w_decay: parse_num(doc, "search", "w_decay", base.search.w_decay)?,
                r_lr: parse_num(doc, "search", "r_lr", base.search.r_lr)?,
                r_decay: parse_num(doc, "search", "r_decay", base.search.r_decay)?,
                w_clip: parse_num(doc, "search", "w_clip", base.search.w_clip)?,
                epsilon: parse_num(doc, "search", "epsilon", base.search.epsilon)?,
                greedy: parse_bool(doc, "search", "greedy", base.search.greedy)?,
                seed: 0,
                first_order: true,
            },
            eval: EvalConfig {
                epochs: parse_num(doc, "eval", "epochs", base.eval.epochs)?,
                batch: parse_num(doc, "eval", "batch", base.eval.batch)?,
                lr: parse_num(doc, "eval", "lr", base.eval.lr)?,
                lr_min: parse_num(doc, "eval", "lr_min", base.eval.lr_min)?,
                weight_decay: parse_num(doc, "eval", "weight_decay", base.eval.weight_decay)?,
                seed: 0,
            },
        };
        cfg.validate().map_err(FormatError::Config)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        Self::from_doc(&ConfigDoc::parse(text)?)
    }

    pub fn to_doc(&self) -> ConfigDoc {
        let mut doc = ConfigDoc::default();
        let shapes: Vec<&str> = self.dataset.shapes.iter().map(|s| s.name()).collect();
        doc.push("dataset", "shapes", shapes.join(","));
        doc.push("dataset", "points", self.dataset.points.to_string());
        doc.push("dataset", "per_class", self.dataset.per_class.to_string());
        doc.push("dataset", "noise", fmt_g17(self.dataset.noise));
        doc.push("dataset", "seed", self.dataset.seed.to_string());
        let (tr, va, te) = self.dataset.fractions;
        doc.push(
            "dataset",
            "fractions",
            format!("{},{},{}", fmt_g17(tr), fmt_g17(va), fmt_g17(te)),
        );
        if let Some(f) = &self.dataset_file {
            doc.push("dataset", "file", f.clone());
        }
        match self.sample_points {
            Some(m) => doc.push("dataset", "sample_points", m.to_string()),
            None => doc.push("dataset", "sample_points", "none".into()),
        }

        doc.push("conv", "levels", self.conv.levels.to_string());
        doc.push("conv", "nodes", self.conv.nodes.to_string());
        doc.push("conv", "hidden", self.conv.hidden.to_string());
        doc.push("conv", "aggregator", agg_name(self.conv.aggregator).into());
        doc.push("conv", "wiring", wiring_name(self.conv.wiring).into());
        let eas: Vec<&str> = self.conv.ea_subset.iter().map(|k| k.name()).collect();
        doc.push("conv", "ea_subset", eas.join(","));

        doc.push("net", "channels", self.channels.to_string());
        doc.push("net", "search_cells", self.search_cells.to_string());
        doc.push("net", "search_k", self.search_k.to_string());
        doc.push("net", "eval_cells", self.eval_cells.to_string());
        doc.push("net", "eval_k", self.eval_k.to_string());

        doc.push("search", "epochs", self.search.epochs.to_string());
        doc.push("search", "batch", self.search.batch.to_string());
        doc.push("search", "w_lr", fmt_g17(self.search.w_lr));
        doc.push("search", "w_lr_min", fmt_g17(self.search.w_lr_min));
        doc.push("search", "w_momentum", fmt_g17(self.search.w_momentum));
        doc.push("search", "w_decay", fmt_g17(self.search.w_decay));
        doc.push("search", "r_lr", fmt_g17(self.search.r_lr));
        doc.push("search", "r_decay", fmt_g17(self.search.r_decay));
        doc.push("search", "w_clip", fmt_g17(self.search.w_clip));
        doc.push("search", "epsilon", fmt_g17(self.search.epsilon));
        doc.push("search", "greedy", self.search.greedy.to_string());

        doc.push("eval", "epochs", self.eval.epochs.to_string());
        doc.push("eval", "batch", self.eval.batch.to_string());
        doc.push("eval", "lr", fmt_g17(self.eval.lr));
        doc.push("eval", "lr_min", fmt_g17(self.eval.lr_min));
        doc.push("eval", "weight_decay", fmt_g17(self.eval.weight_decay));
        doc
    }

    /// Canonical text; its hash identifies the run configuration.
    pub fn to_text(&self) -> String {
        self.to_doc().canonical()
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.dataset.validate().map_err(|e| e.to_string())?;
        self.conv.validate()?;
        self.net_for_search().validate()?;
        self.net_for_eval().validate()?;
        self.search.validate()?;
        self.eval.validate()?;
        if let Some(m) = self.sample_points {
            if m < 3 {
                return Err(format!("sample_points {m} < 3"));
            }
        }
        Ok(())
    }

    pub fn net_for_search(&self) -> NetConfig {
        NetConfig {
            cells: self.search_cells,
            channels: self.channels,
            classes: self.dataset.shapes.len(),
            k: self.search_k,
            conv: self.conv.clone(),
        }
    }

    pub fn net_for_eval(&self) -> NetConfig {
        NetConfig {
            cells: self.eval_cells,
            channels: self.channels,
            classes: self.dataset.shapes.len(),
            k: self.eval_k,
            conv: self.conv.clone(),
        }
    }
}

/// The scientific artifact of a run: the discretized architecture plus
/// enough provenance to tie it back to the producing configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GenotypeFile {
    pub genotype: CellGenotype,
    pub seed: u64,
    pub config_hash: String,
    pub search_epochs: usize,
}

fn conv_section(doc: &mut ConfigDoc, name: &str, g: &ConvGenotype) {
    doc.push(name, "levels", g.levels.to_string());
    doc.push(name, "nodes", g.nodes.to_string());
    doc.push(name, "hidden", g.hidden.to_string());
    doc.push(name, "aggregator", agg_name(g.aggregator).into());
    doc.push(name, "wiring", wiring_name(g.wiring).into());
    let sel: Vec<&str> = g.selections.iter().map(|k| k.name()).collect();
    doc.push(name, "selections", sel.join(","));
}

fn parse_conv_section(doc: &ConfigDoc, name: &str) -> Result<ConvGenotype, FormatError> {
    let need = |key: &str| {
        doc.get(name, key).ok_or_else(|| {
            FormatError::Config(format!("missing key {key:?} in [{name}]"))
        })
    };
    let levels: usize = need("levels")?
        .parse()
        .map_err(|e| FormatError::Config(format!("[{name}] levels: {e}")))?;
    let nodes: usize = need("nodes")?
        .parse()
        .map_err(|e| FormatError::Config(format!("[{name}] nodes: {e}")))?;
    let hidden: usize = need("hidden")?
        .parse()
        .map_err(|e| FormatError::Config(format!("[{name}] hidden: {e}")))?;
    let aggregator = parse_agg(need("aggregator")?).map_err(FormatError::Config)?;
    let wiring = parse_wiring(need("wiring")?).map_err(FormatError::Config)?;
    let selections: Vec<EAKind> = need("selections")?
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|e: String| FormatError::Config(format!("[{name}] selections: {e}")))?;

    let g = ConvGenotype { levels, nodes, hidden, aggregator, wiring, selections };
    let skeleton = ConvConfig {
        levels,
        nodes,
        hidden,
        aggregator,
        ea_subset: EAKind::ALL.to_vec(),
        wiring,
    };
    skeleton.validate().map_err(FormatError::Config)?;
    if g.selections.len() != skeleton.num_slots() {
        return Err(FormatError::Config(format!(
            "[{name}] has {} selections for {} mixture slots",
            g.selections.len(),
            skeleton.num_slots()
        )));
    }
    Ok(g)
}

pub fn write_genotype(gf: &GenotypeFile) -> String {
    let mut doc = ConfigDoc::default();
    doc.push("provenance", "seed", gf.seed.to_string());
    doc.push("provenance", "config_hash", gf.config_hash.clone());
    doc.push("provenance", "search_epochs", gf.search_epochs.to_string());
    for (i, picks) in gf.genotype.nodes.iter().enumerate() {
        let line = picks
            .iter()
            .map(|(src, op)| format!("{src}:{}", op.name()))
            .collect::<Vec<_>>()
            .join(" ");
        doc.push("cell", &format!("node{}", i + 2), line);
    }
    conv_section(&mut doc, "conv conv_a", &gf.genotype.conv_a);
    conv_section(&mut doc, "conv conv_b", &gf.genotype.conv_b);
    format!("{GENOTYPE_HEADER}\n\n{}", doc.canonical())
}

pub fn parse_genotype(text: &str) -> Result<GenotypeFile, FormatError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim();
    if header != GENOTYPE_HEADER {
        return Err(FormatError::Header { found: header.into(), expect: GENOTYPE_HEADER });
    }
    let rest: String = lines.collect::<Vec<_>>().join("\n");
    let doc = ConfigDoc::parse(&rest)?;

    let need = |section: &str, key: &str| {
        doc.get(section, key).ok_or_else(|| {
            FormatError::Config(format!("missing key {key:?} in [{section}]"))
        })
    };
    let seed: u64 = need("provenance", "seed")?
        .parse()
        .map_err(|e| FormatError::Config(format!("provenance seed: {e}")))?;
    let config_hash = need("provenance", "config_hash")?.to_string();
    let search_epochs: usize = need("provenance", "search_epochs")?
        .parse()
        .map_err(|e| FormatError::Config(format!("provenance search_epochs: {e}")))?;

    let mut nodes = [[(0usize, CellOp::Zero); 2]; 3];
    for (i, picks) in nodes.iter_mut().enumerate() {
        let key = format!("node{}", i + 2);
        let line = need("cell", &key)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(FormatError::Config(format!(
                "[cell] {key} needs exactly two src:op entries, got {line:?}"
            )));
        }
        for (slot, part) in picks.iter_mut().zip(parts) {
            let Some((src, op)) = part.split_once(':') else {
                return Err(FormatError::Config(format!("[cell] {key}: bad entry {part:?}")));
            };
            let src: usize = src
                .parse()
                .map_err(|e| FormatError::Config(format!("[cell] {key}: source {src:?}: {e}")))?;
            let op: CellOp = op
                .parse()
                .map_err(|e: String| FormatError::Config(format!("[cell] {key}: {e}")))?;
            *slot = (src, op);
        }
    }

    let genotype = CellGenotype {
        nodes,
        conv_a: parse_conv_section(&doc, "conv conv_a")?,
        conv_b: parse_conv_section(&doc, "conv conv_b")?,
    };
    genotype.validate().map_err(FormatError::Config)?;
    Ok(GenotypeFile { genotype, seed, config_hash, search_epochs })
}

/// What a run leaves behind: its seed, its config hash, and the sha256
/// of every artifact it wrote.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    /// (file name, sha256 hex), sorted by name.
    pub artifacts: Vec<(String, String)>,
}

pub fn write_manifest(m: &Manifest) -> String {
    let mut doc = ConfigDoc::default();
    doc.push("run", "seed", m.seed.to_string());
    doc.push("run", "config_hash", m.config_hash.clone());
    let mut artifacts = m.artifacts.clone();
    artifacts.sort();
    for (name, hash) in &artifacts {
        doc.push("artifacts", name, hash.clone());
    }
    format!("{MANIFEST_HEADER}\n\n{}", doc.canonical())
}

pub fn parse_manifest(text: &str) -> Result<Manifest, FormatError> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim();
    if header != MANIFEST_HEADER {
        return Err(FormatError::Header { found: header.into(), expect: MANIFEST_HEADER });
    }
    let rest: String = lines.collect::<Vec<_>>().join("\n");
    let doc = ConfigDoc::parse(&rest)?;
    let seed: u64 = doc
        .get("run", "seed")
        .ok_or_else(|| FormatError::Config("missing [run] seed".into()))?
        .parse()
        .map_err(|e| FormatError::Config(format!("run seed: {e}")))?;
    let config_hash = doc
        .get("run", "config_hash")
        .ok_or_else(|| FormatError::Config("missing [run] config_hash".into()))?
        .to_string();
    let artifacts = doc
        .sections
        .iter()
        .find(|(n, _)| n == "artifacts")
        .map(|(_, e)| e.clone())
        .unwrap_or_default();
    Ok(Manifest { seed, config_hash, artifacts })
}

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn array(&mut self, a: &Array) {
        self.u32(a.shape().len() as u32);
        for &d in a.shape() {
            self.u32(d as u32);
        }
        for &v in a.data() {
            self.f64(v);
        }
    }

    fn rng(&mut self, s: &RngState) {
        self.buf.extend_from_slice(&s.seed);
        self.u64(s.stream);
        self.u128(s.word_pos);
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.at + n > self.buf.len() {
            return Err(FormatError::Corrupt(format!(
                "need {n} bytes at offset {}, have {}",
                self.at,
                self.buf.len() - self.at
            )));
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128, FormatError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f64(&mut self) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String, FormatError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| FormatError::Corrupt(format!("bad utf8 string: {e}")))
    }

    fn array(&mut self) -> Result<Array, FormatError> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Array::new(shape, data).map_err(|e| FormatError::Corrupt(e.to_string()))
    }

    fn rng(&mut self) -> Result<RngState, FormatError> {
        let seed: [u8; 32] = self.take(32)?.try_into().expect("32 bytes");
        Ok(RngState { seed, stream: self.u64()?, word_pos: self.u128()? })
    }

    fn done(&self) -> Result<(), FormatError> {
        if self.at != self.buf.len() {
            return Err(FormatError::Corrupt(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.at
            )));
        }
        Ok(())
    }
}

fn write_named_arrays(w: &mut ByteWriter, walk: impl FnOnce(&mut dyn FnMut(&str, &Array))) {
    let mut named: Vec<(String, Array)> = Vec::new();
    walk(&mut |name, a| named.push((name.to_string(), a.clone())));
    w.u32(named.len() as u32);
    for (name, a) in &named {
        w.str(name);
        w.array(a);
    }
}

fn read_named_arrays(r: &mut ByteReader) -> Result<Vec<(String, Array)>, FormatError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let a = r.array()?;
        out.push((name, a));
    }
    Ok(out)
}

fn write_plain_arrays(w: &mut ByteWriter, arrays: &[Array]) {
    w.u32(arrays.len() as u32);
    for a in arrays {
        w.array(a);
    }
}

fn read_plain_arrays(r: &mut ByteReader) -> Result<Vec<Array>, FormatError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.array()?);
    }
    Ok(out)
}

/// Serializes a whole search state; loading this back reproduces the
/// training trajectory bit for bit.
pub fn save_checkpoint(state: &SearchState, config_hash: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(config_hash);
    w.u64(state.epoch as u64);
    w.u64(state.step);
    w.rng(&save_state(&state.rng));
    w.rng(&save_state(&state.shuffle_rng));
    write_named_arrays(&mut w, |f| state.weights.walk(f));
    write_named_arrays(&mut w, |f| state.arch.walk(f));

    w.f64(state.w_opt.momentum);
    w.f64(state.w_opt.weight_decay);
    write_plain_arrays(&mut w, &state.w_opt.velocity);

    w.f64(state.r_opt.beta1);
    w.f64(state.r_opt.beta2);
    w.f64(state.r_opt.eps);
    w.f64(state.r_opt.weight_decay);
    w.u64(state.r_opt.t);
    write_plain_arrays(&mut w, &state.r_opt.m);
    write_plain_arrays(&mut w, &state.r_opt.v);

    w.u32(state.log.rows.len() as u32);
    for row in &state.log.rows {
        w.u64(row.epoch as u64);
        w.str(&row.split);
        w.f64(row.loss);
        w.f64(row.acc);
        w.f64(row.gap);
        w.f64(row.lr);
        w.f64(row.epsilon);
    }
    w.buf
}

fn fill_from_named(
    named: Vec<(String, Array)>,
    what: &str,
    mut walk_mut: impl FnMut(&mut dyn FnMut(&str, &mut Array)),
) -> Result<(), FormatError> {
    let mut i = 0;
    let mut problem = None;
    walk_mut(&mut |name, a| {
        if problem.is_some() {
            return;
        }
        match named.get(i) {
            None => problem = Some(format!("{what} array {i} ({name}) missing")),
            Some((n, stored)) if n != name => {
                problem = Some(format!("{what} array {i} is {n:?}, expected {name:?}"))
            }
            Some((_, stored)) if stored.shape() != a.shape() => {
                problem = Some(format!(
                    "{what} array {name:?} has shape {:?}, expected {:?}",
                    stored.shape(),
                    a.shape()
                ))
            }
            Some((_, stored)) => *a = stored.clone(),
        }
        i += 1;
    });
    if let Some(p) = problem {
        return Err(FormatError::Corrupt(p));
    }
    if i != named.len() {
        return Err(FormatError::Corrupt(format!(
            "{what} has {} stored arrays for {} parameters",
            named.len(),
            i
        )));
    }
    Ok(())
}

/// Rebuilds a search state from checkpoint bytes. The configs must be
/// the ones that produced the checkpoint; array names and shapes are
/// checked against a freshly initialized skeleton. With `expect_hash`
/// set, a differing stored config hash is rejected.
pub fn load_checkpoint(
    bytes: &[u8],
    scfg: &SearchConfig,
    ncfg: &NetConfig,
    expect_hash: Option<&str>,
) -> Result<SearchState, FormatError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::Header {
            found: String::from_utf8_lossy(magic).into_owned(),
            expect: "PSCK",
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version { found: version, expect: CHECKPOINT_VERSION });
    }
    let stored_hash = r.str()?;
    if let Some(expect) = expect_hash {
        if stored_hash != expect {
            return Err(FormatError::HashMismatch {
                found: stored_hash,
                expect: expect.to_string(),
            });
        }
    }

    let mut state = SearchState::init(scfg, ncfg);
    state.epoch = r.u64()? as usize;
    state.step = r.u64()?;
    state.rng = restore_state(&r.rng()?);
    state.shuffle_rng = restore_state(&r.rng()?);

    let weights = read_named_arrays(&mut r)?;
    fill_from_named(weights, "weights", |f| state.weights.walk_mut(f))?;
    let arch = read_named_arrays(&mut r)?;
    fill_from_named(arch, "arch", |f| state.arch.walk_mut(f))?;

    state.w_opt = Sgd {
        momentum: r.f64()?,
        weight_decay: r.f64()?,
        velocity: read_plain_arrays(&mut r)?,
    };
    state.r_opt = Adam {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
        weight_decay: r.f64()?,
        t: r.u64()?,
        m: read_plain_arrays(&mut r)?,
        v: read_plain_arrays(&mut r)?,
    };

    let rows = r.u32()? as usize;
    let mut log = MetricLog::default();
    for _ in 0..rows {
        log.rows.push(MetricRow {
            epoch: r.u64()? as usize,
            split: r.str()?,
            loss: r.f64()?,
            acc: r.f64()?,
            gap: r.f64()?,
            lr: r.f64()?,
            epsilon: r.f64()?,
        });
    }
    state.log = log;
    r.done()?;
    Ok(state)
}

/// The discretized cell as a DOT digraph: input nodes 0 and 1, the three
/// intermediate nodes, and the output node 5. Kept operator edges carry
/// a label; the unlabeled dashed edges are the fixed output concat.
pub fn cell_dot(g: &CellGenotype) -> String {
    let mut out = String::from("digraph cell {\n  rankdir=LR;\n");
    for (i, label) in ["in0", "in1", "n2", "n3", "n4", "out"].iter().enumerate() {
        writeln!(out, "  {i} [label=\"{label}\"];").expect("string write");
    }
    for (i, picks) in g.nodes.iter().enumerate() {
        for (src, op) in picks {
            writeln!(out, "  {src} -> {} [label=\"{}\"];", i + 2, op.name()).expect("string write");
        }
    }
    for src in [1, 2, 3, 4] {
        writeln!(out, "  {src} -> 5 [style=dashed];").expect("string write");
    }
    out.push_str("}\n");
    out
}

/// One convolution candidate as a DOT digraph: a node per DAG position
/// per level, one labeled edge per mixture slot (drawn from the pair's
/// first argument, the second argument named in the tooltip), and dashed
/// carry edges into the next level's center input.
pub fn conv_dot(name: &str, g: &ConvGenotype) -> String {
    let cfg = ConvConfig {
        levels: g.levels,
        nodes: g.nodes,
        hidden: g.hidden,
        aggregator: g.aggregator,
        ea_subset: EAKind::ALL.to_vec(),
        wiring: g.wiring,
    };
    let mut out = format!("digraph {name} {{\n  rankdir=LR;\n");
    for level in 0..g.levels {
        for node in 0..g.nodes {
            writeln!(out, "  l{level}_n{node} [label=\"L{level} n{node}\"];")
                .expect("string write");
        }
    }
    for (slot, sel) in cfg.slots().iter().zip(&g.selections) {
        writeln!(
            out,
            "  l{lv}_n{a} -> l{lv}_n{t} [label=\"{ea}\" tooltip=\"b=n{b}\"];",
            lv = slot.level,
            a = slot.a,
            t = slot.target,
            ea = sel.name(),
            b = slot.b,
        )
        .expect("string write");
    }
    for level in 1..g.levels {
        for node in 2..g.nodes {
            writeln!(out, "  l{}_n{node} -> l{level}_n0 [style=dashed];", level - 1)
                .expect("string write");
        }
    }
    out.push_str("}\n");
    out
}

/// Node and labeled-edge counts recovered from DOT text; labels come
/// back in emission order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DotCensus {
    pub nodes: usize,
    pub edge_labels: Vec<String>,
    pub unlabeled_edges: usize,
}

/// Minimal reader for the DOT subset this module emits: one statement
/// per line, node statements without `->`, edge labels in
/// `label="..."`.
pub fn dot_census(text: &str) -> Result<DotCensus, FormatError> {
    let mut census = DotCensus { nodes: 0, edge_labels: Vec::new(), unlabeled_edges: 0 };
    let mut depth = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with("digraph") && t.ends_with('{') {
            depth += 1;
            continue;
        }
        if t == "}" {
            depth = depth.checked_sub(1).ok_or_else(|| FormatError::Parse {
                line: i + 1,
                what: "unbalanced closing brace".into(),
            })?;
            continue;
        }
        if depth == 0 {
            return Err(FormatError::Parse {
                line: i + 1,
                what: format!("statement outside a digraph: {t:?}"),
            });
        }
        if !t.ends_with(';') {
            return Err(FormatError::Parse {
                line: i + 1,
                what: format!("unterminated statement: {t:?}"),
            });
        }
        if t.starts_with("rankdir") {
            continue;
        }
        if t.contains("->") {
            match t.split("label=\"").nth(1).and_then(|rest| rest.split('"').next()) {
                Some(label) => census.edge_labels.push(label.to_string()),
                None => census.unlabeled_edges += 1,
            }
        } else {
            census.nodes += 1;
        }
    }
    if depth != 0 {
        return Err(FormatError::Parse { line: 0, what: "unclosed digraph".into() });
    }
    Ok(census)
}
