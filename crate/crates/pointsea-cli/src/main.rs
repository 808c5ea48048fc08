//! Command-line driver: dataset generation, architecture search, retraining,
//! the association-subset ablation, DOT export, and the gradient-check suite.
//!
//! Every run writes its effective configuration, its artifacts, and a manifest
//! of their hashes into `--out`; rerunning with the same inputs reproduces the
//! artifacts byte for byte.  Input dataset files are never rewritten.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use pointsea::data::{generate, load_dataset, save_dataset, split, Dataset};
use pointsea::ea::parse_subset;
use pointsea::format::{
    cell_dot, conv_dot, parse_genotype, save_checkpoint, sha256_hex, write_genotype,
    write_manifest, GenotypeFile, Manifest, RunConfig,
};
use pointsea::net::CellGenotype;
use pointsea::search::{
    evaluate_genotype, prepare, run_search, search_split, SearchError, SearchState,
};

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cli() -> Command {
    let config = Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("Run configuration; defaults are used when omitted");
    let seed = Arg::new("seed")
        .long("seed")
        .value_name("N")
        .required(true)
        .value_parser(clap::value_parser!(u64))
        .help("Seed for this run");
    let out = Arg::new("out")
        .long("out")
        .value_name("DIR")
        .required(true)
        .help("Output directory; created if missing");
    let genotype = Arg::new("genotype")
        .long("genotype")
        .value_name("FILE")
        .required(true)
        .help("Genotype file produced by a search run");
    let strict = Arg::new("strict")
        .long("strict")
        .action(ArgAction::SetTrue)
        .help("Reject a genotype whose config hash does not match the configuration");
    let cells = Arg::new("cells")
        .long("cells")
        .value_name("N")
        .value_parser(clap::value_parser!(usize))
        .help("Override the number of stacked cells");
    let levels = Arg::new("levels")
        .long("levels")
        .value_name("N")
        .value_parser(clap::value_parser!(usize))
        .help("Override convolution DAG levels");
    let nodes = Arg::new("nodes")
        .long("nodes")
        .value_name("N")
        .value_parser(clap::value_parser!(usize))
        .help("Override convolution DAG nodes per level");
    let k = Arg::new("k")
        .long("k")
        .value_name("N")
        .value_parser(clap::value_parser!(usize))
        .help("Override the neighborhood size");
    let epsilon = Arg::new("epsilon")
        .long("epsilon")
        .value_name("P")
        .value_parser(clap::value_parser!(f64))
        .help("Override the greedy-sampling exploration probability");
    let ea_subset = Arg::new("ea-subset")
        .long("ea-subset")
        .value_name("LIST")
        .help("Restrict association candidates, e.g. e1,e3");

    Command::new("pointsea")
        .about("Searchable point convolutions on synthetic shape classification")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("dataset")
                .about("Dataset utilities")
                .subcommand_required(true)
                .arg_required_else_help(true)
                .subcommand(
                    Command::new("gen")
                        .about("Generate a synthetic shape dataset and save it")
                        .args([config.clone(), seed.clone(), out.clone()]),
                ),
        )
        .subcommand(
            Command::new("search")
                .about("Run the bilevel architecture and convolution search")
                .args([
                    config.clone(),
                    seed.clone(),
                    out.clone(),
                    epsilon.clone(),
                    ea_subset,
                    cells.clone(),
                    levels.clone(),
                    nodes.clone(),
                    k.clone(),
                ]),
        )
        .subcommand(
            Command::new("eval")
                .about("Retrain a searched genotype from scratch and report test accuracy")
                .args([
                    config.clone(),
                    genotype.clone(),
                    seed.clone(),
                    out.clone(),
                    strict.clone(),
                    cells.clone(),
                    levels.clone(),
                    nodes.clone(),
                    k.clone(),
                ]),
        )
        .subcommand(
            Command::new("ablate")
                .about("Search and retrain across association subsets with a shared seed")
                .args([config.clone(), seed.clone(), out.clone(), epsilon, cells, levels, nodes, k]),
        )
        .subcommand(
            Command::new("export-dot")
                .about("Render a genotype as DOT graphs for the cell and both convolutions")
                .args([
                    genotype,
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .help("Write .dot files here instead of printing to stdout"),
                    config,
                    strict.requires("config"),
                ]),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Check every gradient against central finite differences")
                .arg(
                    Arg::new("seed")
                        .long("seed")
                        .value_name("N")
                        .value_parser(clap::value_parser!(u64))
                        .default_value("0")
                        .help("Seed for the probe points"),
                ),
        )
}

fn run() -> Result<()> {
    let m = cli().get_matches();
    match m.subcommand() {
        Some(("dataset", sub)) => match sub.subcommand() {
            Some(("gen", m)) => cmd_dataset_gen(m),
            _ => unreachable!("subcommand required"),
        },
        Some(("search", m)) => cmd_search(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("ablate", m)) => cmd_ablate(m),
        Some(("export-dot", m)) => cmd_export_dot(m),
        Some(("gradcheck", m)) => cmd_gradcheck(m),
        _ => unreachable!("subcommand required"),
    }
}

/// Collects (relative name, sha256) pairs for the manifest as files are
/// written under `root`.
struct OutDir {
    root: PathBuf,
    artifacts: Vec<(String, String)>,
}

impl OutDir {
    fn create(path: &str) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {path}"))?;
        Ok(OutDir { root: PathBuf::from(path), artifacts: Vec::new() })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    fn finish(mut self, seed: u64, config_hash: &str) -> Result<()> {
        let manifest = write_manifest(&Manifest {
            seed,
            config_hash: config_hash.to_string(),
            artifacts: std::mem::take(&mut self.artifacts),
        });
        let path = self.root.join("manifest.txt");
        fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))
    }
}

fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    match m.get_one::<String>("config") {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {p}"))?;
            Ok(RunConfig::parse(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn apply_conv_overrides(cfg: &mut RunConfig, m: &ArgMatches) {
    if let Some(&v) = m.get_one::<usize>("levels") {
        cfg.conv.levels = v;
    }
    if let Some(&v) = m.get_one::<usize>("nodes") {
        cfg.conv.nodes = v;
    }
}

fn validated(cfg: &RunConfig) -> Result<()> {
    cfg.validate().map_err(anyhow::Error::msg)
}

fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset_file {
        Some(p) => load_dataset(Path::new(p)).with_context(|| format!("loading dataset {p}")),
        None => Ok(generate(&cfg.dataset)?),
    }
}

fn cmd_dataset_gen(m: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(m)?;
    let seed = *m.get_one::<u64>("seed").expect("required");
    cfg.dataset.seed = seed;
    validated(&cfg)?;

    let ds = generate(&cfg.dataset)?;
    let mut out = OutDir::create(m.get_one::<String>("out").expect("required"))?;
    out.put("config.cfg", cfg.to_text().as_bytes())?;
    let path = out.root.join("dataset.psea");
    save_dataset(&ds, &path)?;
    let bytes = fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
    out.artifacts.push(("dataset.psea".to_string(), sha256_hex(&bytes)));

    println!(
        "dataset: {} samples, {} classes, {} points each -> {}",
        ds.samples.len(),
        ds.num_classes(),
        ds.points,
        path.display()
    );
    out.finish(seed, &cfg.hash())
}

/// Search under `cfg`, writing artifacts under `prefix` inside `out`.
/// Returns the genotype file and the final validation accuracy.
fn search_into(
    cfg: &RunConfig,
    seed: u64,
    prefix: &str,
    out: &mut OutDir,
    ds: &Dataset,
    progress: bool,
) -> Result<(GenotypeFile, f64)> {
    let mut cfg = cfg.clone();
    cfg.search.seed = seed;
    let hash = cfg.hash();
    let ncfg = cfg.net_for_search();
    let set = prepare(ds, cfg.search_k, cfg.sample_points)?;
    let splits = split(ds, cfg.dataset.fractions, cfg.dataset.seed);
    let ssplit = search_split(&splits);

    let mut state = SearchState::init(&cfg.search, &ncfg);
    let ckpt_path = out.root.join(format!("{prefix}checkpoint.psck"));
    let epochs = cfg.search.epochs;
    let outcome = run_search(&cfg.search, &ncfg, &set, &ssplit, &mut state, |st| {
        let bytes = save_checkpoint(st, &hash);
        fs::write(&ckpt_path, &bytes)
            .map_err(|e| SearchError::Config(format!("writing checkpoint: {e}")))?;
        if progress {
            if let Some(row) = st.log.rows.last() {
                eprintln!(
                    "epoch {:>3}/{epochs}  {} loss {:.4}  acc {:.3}  gap {:.4}",
                    st.epoch, row.split, row.loss, row.acc, row.gap
                );
            }
        }
        Ok(())
    })?;
    out.put(&format!("{prefix}checkpoint.psck"), &save_checkpoint(&state, &hash))?;

    let gf = GenotypeFile {
        genotype: outcome.genotype,
        seed,
        config_hash: hash,
        search_epochs: epochs,
    };
    out.put(&format!("{prefix}genotype.txt"), write_genotype(&gf).as_bytes())?;
    out.put(&format!("{prefix}metrics.csv"), state.log.to_csv().as_bytes())?;
    out.put(&format!("{prefix}cell.dot"), cell_dot(&gf.genotype).as_bytes())?;
    out.put(&format!("{prefix}conv_a.dot"), conv_dot("conv_a", &gf.genotype.conv_a).as_bytes())?;
    out.put(&format!("{prefix}conv_b.dot"), conv_dot("conv_b", &gf.genotype.conv_b).as_bytes())?;

    let val_acc = state
        .log
        .rows
        .iter()
        .rev()
        .find(|r| r.split == "val")
        .map(|r| r.acc)
        .unwrap_or(0.0);
    Ok((gf, val_acc))
}

/// Retrain `genotype` from scratch under `cfg`; returns test accuracy.
fn eval_into(
    cfg: &RunConfig,
    genotype: &CellGenotype,
    seed: u64,
    prefix: &str,
    out: &mut OutDir,
    ds: &Dataset,
) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.eval.seed = seed;
    let ncfg = cfg.net_for_eval();
    let set = prepare(ds, cfg.eval_k, cfg.sample_points)?;
    let splits = split(ds, cfg.dataset.fractions, cfg.dataset.seed);
    let outcome = evaluate_genotype(
        &cfg.eval,
        &ncfg,
        genotype,
        &set,
        &splits.train,
        &splits.val,
        &splits.test,
    )?;
    out.put(&format!("{prefix}retrain_metrics.csv"), outcome.log.to_csv().as_bytes())?;
    Ok(outcome.test_acc)
}

fn cmd_search(m: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(m)?;
    apply_conv_overrides(&mut cfg, m);
    if let Some(&v) = m.get_one::<usize>("cells") {
        cfg.search_cells = v;
    }
    if let Some(&v) = m.get_one::<usize>("k") {
        cfg.search_k = v;
    }
    if let Some(&v) = m.get_one::<f64>("epsilon") {
        cfg.search.epsilon = v;
    }
    if let Some(s) = m.get_one::<String>("ea-subset") {
        cfg.conv.ea_subset = parse_subset(s).map_err(anyhow::Error::msg)?;
    }
    let seed = *m.get_one::<u64>("seed").expect("required");
    validated(&cfg)?;

    let ds = load_or_generate(&cfg)?;
    let mut out = OutDir::create(m.get_one::<String>("out").expect("required"))?;
    out.put("config.cfg", cfg.to_text().as_bytes())?;
    let (_, val_acc) = search_into(&cfg, seed, "", &mut out, &ds, true)?;
    println!(
        "search: final val acc {:.4}, genotype {}",
        val_acc,
        out.root.join("genotype.txt").display()
    );
    out.finish(seed, &cfg.hash())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(m)?;
    apply_conv_overrides(&mut cfg, m);
    if let Some(&v) = m.get_one::<usize>("cells") {
        cfg.eval_cells = v;
    }
    if let Some(&v) = m.get_one::<usize>("k") {
        cfg.eval_k = v;
    }
    let seed = *m.get_one::<u64>("seed").expect("required");

    let gpath = m.get_one::<String>("genotype").expect("required");
    let text = fs::read_to_string(gpath).with_context(|| format!("reading genotype {gpath}"))?;
    let gf = parse_genotype(&text)?;
    if m.get_flag("strict") && gf.config_hash != cfg.hash() {
        bail!(
            "genotype was searched under config {} but this run is {} (--strict)",
            gf.config_hash,
            cfg.hash()
        );
    }
    validated(&cfg)?;

    let ds = load_or_generate(&cfg)?;
    let mut out = OutDir::create(m.get_one::<String>("out").expect("required"))?;
    out.put("config.cfg", cfg.to_text().as_bytes())?;
    let acc = eval_into(&cfg, &gf.genotype, seed, "", &mut out, &ds)?;
    println!("eval: test acc {acc:.4}");
    out.finish(seed, &cfg.hash())
}

/// Association subsets mirrored row for row from the ablation table; the
/// last row switches greedy sampling on over the full candidate set.
const ABLATION_ROWS: [(&str, &str, bool); 7] = [
    ("a", "e1", false),
    ("b", "e1,e2", false),
    ("c", "e1,e3", false),
    ("d", "e1,e2,e3", false),
    ("e", "e1,e2,e3,e4", false),
    ("f", "e1,e2,e3,e4,e5", false),
    ("g", "e1,e2,e3,e4,e5", true),
];

fn worker_count(rows: usize) -> Result<usize> {
    let n = match std::env::var("POINTSEA_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .with_context(|| format!("POINTSEA_THREADS={v:?} is not a positive integer"))?,
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    Ok(n.min(rows))
}

struct AblationRow {
    model: &'static str,
    subset: &'static str,
    greedy: bool,
    test_acc: f64,
    artifacts: Vec<(String, String)>,
}

fn run_ablation_row(
    base: &RunConfig,
    seed: u64,
    root: &Path,
    row: (&'static str, &'static str, bool),
) -> Result<AblationRow> {
    let (model, subset, greedy) = row;
    let mut cfg = base.clone();
    cfg.conv.ea_subset = parse_subset(subset).map_err(anyhow::Error::msg)?;
    cfg.search.greedy = greedy;
    validated(&cfg)?;

    // Neighbor indices hold shared non-atomic references, so each worker
    // prepares its own copies from its own dataset instance.
    let ds = load_or_generate(&cfg)?;
    let dir = root.join(format!("row_{model}"));
    let mut out = OutDir::create(dir.to_str().expect("utf8 path"))?;
    out.put("config.cfg", cfg.to_text().as_bytes())?;
    let (gf, _) = search_into(&cfg, seed, "", &mut out, &ds, false)?;
    let test_acc = eval_into(&cfg, &gf.genotype, seed, "", &mut out, &ds)?;
    eprintln!("row {model} ({subset}, greedy {greedy}): test acc {test_acc:.4}");

    let artifacts = out
        .artifacts
        .drain(..)
        .map(|(name, hash)| (format!("row_{model}/{name}"), hash))
        .collect();
    Ok(AblationRow { model, subset, greedy, test_acc, artifacts })
}

fn cmd_ablate(m: &ArgMatches) -> Result<()> {
    let mut cfg = load_config(m)?;
    apply_conv_overrides(&mut cfg, m);
    if let Some(&v) = m.get_one::<usize>("cells") {
        cfg.search_cells = v;
        cfg.eval_cells = v;
    }
    if let Some(&v) = m.get_one::<usize>("k") {
        cfg.search_k = v;
        cfg.eval_k = v;
    }
    if let Some(&v) = m.get_one::<f64>("epsilon") {
        cfg.search.epsilon = v;
    }
    let seed = *m.get_one::<u64>("seed").expect("required");
    validated(&cfg)?;

    let mut out = OutDir::create(m.get_one::<String>("out").expect("required"))?;
    out.put("config.cfg", cfg.to_text().as_bytes())?;

    let workers = worker_count(ABLATION_ROWS.len())?;
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<AblationRow>>> = Vec::new();
    slots.resize_with(ABLATION_ROWS.len(), || None);

    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..workers {
            let next = &next;
            let cfg = &cfg;
            let root = out.root.clone();
            handles.push(scope.spawn(move || {
                let mut done = Vec::new();
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= ABLATION_ROWS.len() {
                        break;
                    }
                    done.push((i, run_ablation_row(cfg, seed, &root, ABLATION_ROWS[i])));
                }
                done
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("ablation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });

    let mut csv = String::from("model,ea_subset,subset_size,greedy,test_acc\n");
    for slot in slots {
        let row = slot
            .expect("every row index dispatched")
            .with_context(|| "ablation row failed")?;
        let size = row.subset.split(',').count();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.model,
            row.subset.replace(',', "+"),
            size,
            row.greedy,
            row.test_acc
        ));
        out.artifacts.extend(row.artifacts);
    }
    out.put("ablation.csv", csv.as_bytes())?;
    print!("{csv}");
    out.finish(seed, &cfg.hash())
}

fn cmd_export_dot(m: &ArgMatches) -> Result<()> {
    let gpath = m.get_one::<String>("genotype").expect("required");
    let text = fs::read_to_string(gpath).with_context(|| format!("reading genotype {gpath}"))?;
    let gf = parse_genotype(&text)?;
    if m.get_flag("strict") {
        let cfg = load_config(m)?;
        if gf.config_hash != cfg.hash() {
            bail!(
                "genotype was searched under config {} but this config is {} (--strict)",
                gf.config_hash,
                cfg.hash()
            );
        }
    }

    let cell = cell_dot(&gf.genotype);
    let conv_a = conv_dot("conv_a", &gf.genotype.conv_a);
    let conv_b = conv_dot("conv_b", &gf.genotype.conv_b);
    match m.get_one::<String>("out") {
        Some(dir) => {
            let mut out = OutDir::create(dir)?;
            out.put("cell.dot", cell.as_bytes())?;
            out.put("conv_a.dot", conv_a.as_bytes())?;
            out.put("conv_b.dot", conv_b.as_bytes())?;
            println!("wrote cell.dot, conv_a.dot, conv_b.dot to {dir}");
            out.finish(gf.seed, &gf.config_hash)
        }
        None => {
            print!("{cell}{conv_a}{conv_b}");
            Ok(())
        }
    }
}

fn cmd_gradcheck(m: &ArgMatches) -> Result<()> {
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let checks = pointsea::gradcheck::run_all(seed);
    let mut failed = 0usize;
    for c in &checks {
        let status = if c.passed() {
            "ok"
        } else {
            failed += 1;
            "FAIL"
        };
        println!("{:<28} max rel err {:>12.5e}  tol {:.0e}  {status}", c.name, c.rel_err, c.tol);
    }
    println!("{} checks, {failed} failed", checks.len());
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}
