//! One function per subcommand. Each records its inputs and outputs on the
//! [`Run`] and returns the default manifest location.

use crate::manifest::{beside, create_dir, Run};
use crate::sample_file::{format_sample, parse_sample, SampleHeader};
use crate::{
    CheckStage, CurateArgs, EvaluateArgs, ExtractArgs, GradcheckArgs, SampleArgs, SynthArgs, TrainArgs, EXIT_IO,
    EXIT_MISMATCH, EXIT_NUMERIC, EXIT_USAGE,
};
use enzymeflow::coevolution::{format_msa, read_msa, CoEvoVocabulary};
use enzymeflow::config::Stage;
use enzymeflow::data::{
    canonical_record, dataset_stats, debias, extract_pocket as pocket_within, format_dataset_manifest, format_labels,
    format_pocket_lines, format_raw_list, format_stats_tsv, format_structure, generate_synthetic_dataset,
    load_dataset, read_dataset_manifest, read_labels, read_pocket, read_raw_list, read_structure, scale_pocket,
    DatasetEntry, Label, RawEntry, StatsEntry, SynthConfig,
};
use enzymeflow::engine::{gradcheck as run_gradcheck, sample as run_sample, train_stage, GradcheckOptions, SampleOptions, StepLog};
use enzymeflow::eval::{aar, build_report, format_plot_csv, format_report_tsv, rmsd_after_alignment, tm_score, SampleMetrics};
use enzymeflow::geometry::{Pocket, ResidueFrame, MODEL_UNITS_PER_ANGSTROM};
use enzymeflow::io_util::{read_to_string, sha256_hex};
use enzymeflow::molecule::{format_molecule, read_molecule, MoleculeFile};
use enzymeflow::network::VectorFieldNetwork;
use enzymeflow::nn::{read_checkpoint, save_checkpoint};
use enzymeflow::{Error, ErrorFamily};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// A check ran to completion and did not pass.
    Check(String),
    /// Replay found different inputs or outputs.
    Mismatch(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Mismatch(m) => write!(f, "replay mismatch: {m}"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e.family() {
                ErrorFamily::Usage => EXIT_USAGE,
                ErrorFamily::Io => EXIT_IO,
                ErrorFamily::Numeric => EXIT_NUMERIC,
            },
            Failure::Check(_) => EXIT_NUMERIC,
            Failure::Mismatch(_) => EXIT_MISMATCH,
        }
    }
}

type CmdResult = Result<PathBuf, Failure>;

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_bytes(run: &mut Run, path: &Path) -> Result<Vec<u8>, Error> {
    run.input(path)?;
    std::fs::read(path).map_err(|e| io_error(path, e))
}

pub fn extract_pocket(run: &mut Run, args: &ExtractArgs) -> CmdResult {
    run.input(&args.structure)?;
    run.input(&args.ligand)?;
    let structure = read_structure(&args.structure)?;
    let ligand = read_molecule(&args.ligand)?;
    let pocket = pocket_within(&structure, &ligand.coords, args.radius)?;
    let text = format!(
        "# pocket: {} residues within {} Å of the ligand\n{}",
        pocket.len(),
        args.radius,
        format_pocket_lines(&pocket)
    );
    run.write(&args.out, text.as_bytes())?;
    Ok(beside(&args.out))
}

struct Curated {
    raw: RawEntry,
    label: Label,
    pocket: Pocket,
    stats: StatsEntry,
}

fn molecule_key(m: &MoleculeFile) -> String {
    sha256_hex(format_molecule(m).as_bytes())
}

pub fn curate(run: &mut Run, args: &CurateArgs) -> CmdResult {
    if !(0.0..=1.0).contains(&args.homology) {
        return Err(Error::Config(format!("--homology {} is not in [0, 1]", args.homology)).into());
    }
    run.input(&args.list)?;
    run.input(&args.labels)?;
    let raw = read_raw_list(&args.list)?;
    let labels = read_labels(&args.labels)?;
    let mut extracted = Vec::new();
    for entry in raw {
        for p in [&entry.structure, &entry.substrate, &entry.product, &entry.msa] {
            run.input(p)?;
        }
        let label = *labels
            .get(&entry.id)
            .ok_or_else(|| Error::Config(format!("no label for {}", entry.id)))?;
        let structure = read_structure(&entry.structure)?;
        let substrate = read_molecule(&entry.substrate)?;
        let product = read_molecule(&entry.product)?;
        read_msa(&entry.msa)?;
        let pocket = match pocket_within(&structure, &substrate.coords, args.radius) {
            Ok(p) => p,
            Err(Error::EmptyPocket { .. }) => {
                log::warn!("{}: no residue within {} Å of the substrate, skipped", entry.id, args.radius);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let stats = StatsEntry {
            sequence: structure.sequence(),
            substrate_key: molecule_key(&substrate),
            substrate_atoms: substrate.elements.len(),
            product_key: molecule_key(&product),
            product_atoms: product.elements.len(),
            ec_digit: label.ec,
        };
        extracted.push(Curated {
            raw: entry,
            label,
            pocket,
            stats,
        });
    }
    let filtered: Vec<&Curated> = extracted.iter().filter(|c| c.pocket.len() >= args.min_residues).collect();
    let seqs: Vec<String> = filtered.iter().map(|c| c.stats.sequence.clone()).collect();
    let kept: Vec<&Curated> = debias(&seqs, args.homology)?.into_iter().map(|i| filtered[i]).collect();

    let mut dataset = Vec::new();
    for c in &kept {
        let id = &c.raw.id;
        let rel = |name: String| PathBuf::from("inputs").join(name);
        let entry = DatasetEntry {
            id: id.clone(),
            pocket: PathBuf::from("pockets").join(format!("{id}.pocket")),
            substrate: rel(format!("{id}.substrate.mol")),
            product: rel(format!("{id}.product.mol")),
            msa: rel(format!("{id}.msa")),
            ec: c.label.ec,
            affinity: c.label.affinity,
        };
        run.write(&args.out.join(&entry.pocket), format_pocket_lines(&c.pocket).as_bytes())?;
        for (src, dst) in [
            (&c.raw.substrate, &entry.substrate),
            (&c.raw.product, &entry.product),
            (&c.raw.msa, &entry.msa),
        ] {
            let bytes = read_bytes(run, src)?;
            run.write(&args.out.join(dst), &bytes)?;
        }
        dataset.push(entry);
    }
    let rows = [
        dataset_stats("extracted", &extracted.iter().map(|c| &c.stats).collect::<Vec<_>>()),
        dataset_stats("filtered", &filtered.iter().map(|c| &c.stats).collect::<Vec<_>>()),
        dataset_stats("debiased", &kept.iter().map(|c| &c.stats).collect::<Vec<_>>()),
    ];
    run.write(&args.out.join("stats.tsv"), format_stats_tsv(&rows).as_bytes())?;
    run.write(&args.out.join("dataset.tsv"), format_dataset_manifest(&dataset).as_bytes())?;
    log::info!(
        "curated {} of {} entries ({} passed the size filter)",
        kept.len(),
        extracted.len(),
        filtered.len()
    );
    Ok(args.out.join("manifest.json"))
}

pub fn synth_data(run: &mut Run, args: &SynthArgs) -> CmdResult {
    if args.records == 0 || args.pocket_residues == 0 {
        return Err(Error::Config("--records and --pocket-residues must be positive".into()).into());
    }
    run.seed = Some(args.seed);
    let cfg = SynthConfig {
        records: args.records,
        pocket_residues: args.pocket_residues,
        ..SynthConfig::default()
    };
    let entries = generate_synthetic_dataset(&mut ChaCha8Rng::seed_from_u64(args.seed), &cfg);
    let mut raw = Vec::new();
    let mut labels = BTreeMap::new();
    for e in &entries {
        let r = RawEntry {
            id: e.id.clone(),
            structure: PathBuf::from("structures").join(format!("{}.pdb", e.id)),
            substrate: PathBuf::from("molecules").join(format!("{}.substrate.mol", e.id)),
            product: PathBuf::from("molecules").join(format!("{}.product.mol", e.id)),
            msa: PathBuf::from("msa").join(format!("{}.msa", e.id)),
        };
        run.write(&args.out.join(&r.structure), format_structure(&e.structure).as_bytes())?;
        run.write(&args.out.join(&r.substrate), format_molecule(&e.substrate).as_bytes())?;
        run.write(&args.out.join(&r.product), format_molecule(&e.product).as_bytes())?;
        run.write(&args.out.join(&r.msa), format_msa(&e.alignment).as_bytes())?;
        labels.insert(
            e.id.clone(),
            Label {
                ec: e.ec,
                affinity: e.affinity,
            },
        );
        raw.push(r);
    }
    run.write(&args.out.join("raw.tsv"), format_raw_list(&raw).as_bytes())?;
    run.write(&args.out.join("labels.tsv"), format_labels(&labels).as_bytes())?;
    Ok(args.out.join("manifest.json"))
}

/// Records the manifest and every file it lists as inputs.
fn dataset_inputs(run: &mut Run, manifest: &Path) -> Result<Vec<DatasetEntry>, Error> {
    run.input(manifest)?;
    let entries = read_dataset_manifest(manifest)?;
    for e in &entries {
        for p in [&e.pocket, &e.substrate, &e.product, &e.msa] {
            run.input(p)?;
        }
    }
    Ok(entries)
}

fn load_network(run: &mut Run, checkpoint: Option<&Path>) -> Result<VectorFieldNetwork, Error> {
    let mut net = VectorFieldNetwork::new(&run.cfg.model);
    if let Some(path) = checkpoint {
        run.input(path)?;
        let ckpt = read_checkpoint(path)?;
        if ckpt.config_hash != run.cfg.model_hash() {
            return Err(Error::Config(format!(
                "{}: checkpoint was written under a different model configuration",
                path.display()
            )));
        }
        ckpt.load_into(&mut net.params, path)?;
    }
    Ok(net)
}

fn format_log(log: &[StepLog]) -> String {
    let mut s = format!("{}\n", StepLog::HEADER);
    for l in log {
        s.push_str(&l.to_tsv());
        s.push('\n');
    }
    s
}

pub fn train(run: &mut Run, args: &TrainArgs) -> CmdResult {
    if let Some(stage) = args.stage {
        run.cfg.train.stage = stage;
    }
    if let Some(steps) = args.steps {
        run.cfg.train.steps = steps;
    }
    if let Some(seed) = args.seed {
        run.cfg.train.seed = seed;
    }
    run.cfg.validate()?;
    run.seed = Some(run.cfg.train.seed);
    dataset_inputs(run, &args.data)?;
    let records = load_dataset(&args.data, &run.cfg.model)?;
    let mut net = load_network(run, args.init.as_deref())?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut name = args.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".log.tsv");
        args.out.with_file_name(name)
    });
    let mut log = Vec::new();
    let train_cfg = run.cfg.train.clone();
    let loss_cfg = run.cfg.loss.clone();
    let stage = train_cfg.stage;
    let outcome = train_stage(&mut net, &records, &train_cfg, &loss_cfg, &mut log, |l| {
        if l.step % 100 == 0 {
            log::info!("{stage} step {} loss {:.4}", l.step, l.total);
        }
    });
    match outcome {
        Ok(()) => {}
        Err(e) if e.family() == ErrorFamily::Numeric => {
            // the network still holds the parameters from before the failing step
            if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            save_checkpoint(&args.out, &net.params, &run.cfg.model_hash(), train_cfg.seed)?;
            run.write(&log_path, format_log(&log).as_bytes())?;
            log::error!("last good parameters saved to {}", args.out.display());
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_checkpoint(&args.out, &net.params, &run.cfg.model_hash(), train_cfg.seed)?;
    run.record_output(&args.out)?;
    run.write(&log_path, format_log(&log).as_bytes())?;
    Ok(beside(&args.out))
}

struct Target {
    id: String,
    substrate: enzymeflow::molecule::Molecule3D,
    product: enzymeflow::molecule::Molecule2D,
    n_res: usize,
    /// Å offset added back to generated coordinates.
    origin: Vector3<f64>,
}

fn sample_targets(run: &mut Run, args: &SampleArgs) -> Result<Vec<Target>, Error> {
    if let Some(data) = &args.data {
        dataset_inputs(run, data)?;
        let records = load_dataset(data, &run.cfg.model)?;
        let targets: Vec<Target> = records
            .into_iter()
            .filter(|r| args.record.as_ref().is_none_or(|id| *id == r.id))
            .map(|r| Target {
                n_res: r.pocket.len(),
                id: r.id,
                substrate: r.substrate,
                product: r.product,
                origin: r.origin,
            })
            .collect();
        if targets.is_empty() {
            return Err(Error::Config("no record to sample for".into()));
        }
        return Ok(targets);
    }
    let (Some(sub), Some(prod), Some(n_res)) = (&args.substrate, &args.product, args.n_res) else {
        return Err(Error::Config("sample needs --data or --substrate, --product and --n-res".into()));
    };
    run.input(sub)?;
    run.input(prod)?;
    let substrate = read_molecule(sub)?;
    let product = read_molecule(prod)?;
    if substrate.elements.is_empty() {
        return Err(Error::Graph(format!("{}: substrate has no atoms", sub.display())));
    }
    let origin = substrate.coords.iter().sum::<Vector3<f64>>() / substrate.coords.len() as f64;
    let centered = MoleculeFile {
        coords: substrate.coords.iter().map(|c| c - origin).collect(),
        ..substrate
    };
    let id = sub
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "denovo".into());
    Ok(vec![Target {
        id,
        substrate: centered.to_3d()?,
        product: product.to_2d()?,
        n_res,
        origin,
    }])
}

pub fn sample(run: &mut Run, args: &SampleArgs) -> CmdResult {
    if let Some(t) = args.steps {
        run.cfg.sample.steps = t;
    }
    if let Some(n) = args.n_samples {
        run.cfg.sample.n_samples = n;
    }
    if let Some(seed) = args.seed {
        run.cfg.sample.seed = seed;
    }
    run.cfg.validate()?;
    let sc = run.cfg.sample.clone();
    run.seed = Some(sc.seed);
    let net = load_network(run, Some(&args.checkpoint))?;
    let targets = sample_targets(run, args)?;
    let opts = SampleOptions {
        steps: sc.steps,
        divisor_floor: run.cfg.loss.divisor_floor,
        keep_trajectory: false,
    };
    let jobs: Vec<(usize, usize)> = (0..targets.len())
        .flat_map(|t| (0..sc.n_samples).map(move |k| (t, k)))
        .collect();
    // every job owns its RNG stream, so the fan-out cannot change results
    let stream = |t: usize, k: usize| ((t as u64) << 32) | k as u64;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let chunk = jobs.len().div_ceil(workers);
    let results: Vec<_> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                let (net, targets) = (&net, &targets);
                scope.spawn(move || {
                    part.iter()
                        .map(|&(t, k)| {
                            let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
                            rng.set_stream(stream(t, k));
                            let tg = &targets[t];
                            run_sample(net, Some(&tg.substrate), Some(&tg.product), tg.n_res, opts, &mut rng)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sampling worker panicked"))
            .collect()
    });
    let vocab = CoEvoVocabulary::standard();
    let hash = run.cfg.model_hash();
    for (&(t, k), result) in jobs.iter().zip(results) {
        let out = result?;
        let tg = &targets[t];
        let pocket = Pocket::new(
            scale_pocket(&out.pocket, 1.0 / MODEL_UNITS_PER_ANGSTROM)
                .residues
                .iter()
                .map(|r| ResidueFrame {
                    trans: r.trans + tg.origin,
                    ..*r
                })
                .collect(),
        );
        let header = SampleHeader {
            record: tg.id.clone(),
            seed: sc.seed,
            stream: stream(t, k),
            steps: sc.steps,
            config_hash: hash.clone(),
        };
        let text = format_sample(&header, &pocket, out.ec + 1, &out.coevo, &vocab);
        run.write(&args.out.join(&tg.id).join(format!("sample_{k:03}.txt")), text.as_bytes())?;
    }
    Ok(args.out.join("manifest.json"))
}

fn sample_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("sample_") && n.ends_with(".txt"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn evaluate(run: &mut Run, args: &EvaluateArgs) -> CmdResult {
    if args.k == 0 {
        return Err(Error::Config("--k must be positive".into()).into());
    }
    let entries = dataset_inputs(run, &args.data)?;
    let mut metrics = Vec::new();
    for e in &entries {
        let reference = read_pocket(&e.pocket)?;
        let files = sample_files(&args.samples.join(&e.id))?;
        if files.is_empty() {
            log::warn!("{}: no samples found", e.id);
        }
        for f in files {
            run.input(&f)?;
            let s = parse_sample(&read_to_string(&f)?, &f)?;
            if s.pocket.len() != reference.len() {
                return Err(Error::Shape(format!(
                    "{}: {} residues, reference has {}",
                    f.display(),
                    s.pocket.len(),
                    reference.len()
                ))
                .into());
            }
            let (pred, truth) = (s.pocket.ca_positions(), reference.ca_positions());
            metrics.push(SampleMetrics {
                reaction: e.id.clone(),
                sample: f.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                crmsd: rmsd_after_alignment(&pred, &truth)?,
                tm: if truth.len() >= 16 { Some(tm_score(&pred, &truth)?) } else { None },
                aar: aar(&s.pocket.aatypes(), &reference.aatypes())?,
                ec_pred: s.ec_digit,
                ec_true: e.ec,
            });
        }
    }
    if metrics.is_empty() {
        return Err(Error::Config(format!("no sample files under {}", args.samples.display())).into());
    }
    let report = build_report(metrics, args.k)?;
    run.write(&args.out.join("report.tsv"), format_report_tsv(&report).as_bytes())?;
    run.write(&args.out.join("plot.csv"), format_plot_csv(&report).as_bytes())?;
    Ok(args.out.join("manifest.json"))
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn gradcheck(run: &mut Run, args: &GradcheckArgs) -> CmdResult {
    let net = load_network(run, args.checkpoint.as_deref())?;
    let record = canonical_record(&run.cfg.model);
    let stages: Vec<Stage> = match args.stage {
        CheckStage::Backbone => vec![Stage::Backbone],
        CheckStage::Ligand => vec![Stage::Ligand],
        CheckStage::Enzyme => vec![Stage::Enzyme],
        // between them these two stages route gradient into every tensor
        CheckStage::All => vec![Stage::Ligand, Stage::Enzyme],
    };
    let opts = GradcheckOptions::default();
    run.seed = Some(opts.seed);
    let mut text = String::from("stage\ttensor\tmax_rel_error\tentries\tmax_abs_grad\n");
    let mut worst: Option<(f64, String)> = None;
    let mut reached = BTreeSet::new();
    for stage in &stages {
        for c in run_gradcheck(&net, &record, *stage, &run.cfg.loss, &opts)? {
            text.push_str(&format!(
                "{stage}\t{}\t{:.6e}\t{}\t{:.6e}\n",
                c.name, c.max_rel_error, c.entries_checked, c.max_abs_grad
            ));
            if c.max_abs_grad > 0.0 {
                reached.insert(c.name.clone());
            }
            if worst.as_ref().is_none_or(|(w, _)| c.max_rel_error > *w || c.max_rel_error.is_nan()) {
                worst = Some((c.max_rel_error, format!("{stage} {}", c.name)));
            }
        }
    }
    let unreached: Vec<String> = net
        .params
        .ids()
        .map(|id| net.params.name(id).to_string())
        .filter(|n| !reached.contains(n))
        .collect();
    run.write(&args.out, text.as_bytes())?;
    let manifest = beside(&args.out);
    if let Some((w, name)) = &worst {
        if !(*w < GRADCHECK_TOLERANCE) {
            return Err(Failure::Check(format!("{name}: relative error {w:.3e} ≥ {GRADCHECK_TOLERANCE:e}")));
        }
    }
    if args.stage == CheckStage::All && !unreached.is_empty() {
        return Err(Failure::Check(format!("no gradient reaches {}", unreached.join(", "))));
    }
    Ok(manifest)
}
