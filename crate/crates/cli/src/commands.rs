use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use potsal::cnn::{load_weights, save_weights};
use potsal::data::{self, SyntheticDataset};
use potsal::eval::{
    attribution_report, collect_misclassified, collect_profiles, run_sweep, write_attribution_csv,
    write_report_csv, EvalConfig, Ranker,
};
use potsal::profiles::{load_profiles, save_profiles};
use potsal::rank::{pot_saliency, rank, write_ranking_csv, zscore_saliency, Method};
use potsal::tail::{fit_tail_model, load_tail_model, save_tail_model};
use potsal::train::{train, TrainConfig};
use potsal::Error;
use serde_json::json;

use crate::args::{Command, EvalArgs, FitArgs, ProfilesArgs, RankArgs, ToyCommand, TrainArgs};
use crate::manifest::{read_manifest, RunManifest};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        // Config errors come from flag values the parser cannot check alone.
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

/// Files a command read and wrote, recorded in its run manifest.
#[derive(Debug, Default)]
pub struct Files {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Where the run manifest goes; `None` when output went to stdout.
    pub manifest: Option<PathBuf>,
}

pub fn run(command: &Command) -> Outcome {
    if let Command::Replay(args) = command {
        return replay(&args.manifest);
    }
    let files = execute(command)?;
    if let Some(path) = &files.manifest {
        RunManifest::new(command, &files)?.write(path)?;
    }
    Ok(())
}

fn execute(command: &Command) -> Outcome<Files> {
    match command {
        Command::Toy(ToyCommand::Train(a)) => toy_train(a),
        Command::Toy(ToyCommand::Profiles(a)) => toy_profiles(a),
        Command::Fit(a) => fit(a),
        Command::Rank(a) => rank_sample(a),
        Command::Eval(a) => eval(a),
        Command::Replay(_) => unreachable!("handled by run"),
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    ensure_parent(path)?;
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn toy_train(a: &TrainArgs) -> Outcome<Files> {
    let dataset = SyntheticDataset::generate(a.data_seed, data::Split::Train, a.train_samples);
    let config = TrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let net = train(&dataset, &config)?;
    let notes = json!({
        "train": config,
        "data_seed": a.data_seed,
        "train_samples": a.train_samples,
    });
    ensure_parent(&a.out)?;
    save_weights(&net, a.seed, notes, &a.out)?;
    Ok(Files {
        inputs: vec![],
        outputs: vec![a.out.clone()],
        manifest: Some(sidecar(&a.out)),
    })
}

fn toy_profiles(a: &ProfilesArgs) -> Outcome<Files> {
    let (net, _) = load_weights(&a.weights)?;
    let dataset = SyntheticDataset::generate(a.data_seed, a.split, a.num_samples);
    let matrix = collect_profiles(&net, &dataset)?;
    let manifest = save_profiles(&matrix, &a.out)?;
    Ok(Files {
        inputs: vec![a.weights.clone()],
        outputs: vec![manifest, a.out.join(potsal::profiles::MATRIX_FILE)],
        manifest: Some(a.out.join("run.json")),
    })
}

fn fit(a: &FitArgs) -> Outcome<Files> {
    let matrix = load_profiles(&a.manifest)?;
    let model = fit_tail_model(&matrix, a.quantile)?;
    if model.num_degenerate() > 0 {
        eprintln!(
            "warning: {} of {} filters have degenerate tails and score 1",
            model.num_degenerate(),
            model.num_filters()
        );
    }
    save_tail_model(&model, &a.out)?;
    Ok(Files {
        inputs: vec![a.manifest.clone()],
        outputs: vec![a.out.clone()],
        manifest: Some(sidecar(&a.out)),
    })
}

fn rank_sample(a: &RankArgs) -> Outcome<Files> {
    let model = load_tail_model(&a.model)?;
    let (net, _) = load_weights(&a.weights)?;
    let sample = data::sample(a.data_seed, a.split, a.sample_index);
    if net.forward(&sample.image)?.argmax() == sample.label {
        eprintln!(
            "warning: sample {} of split {} is classified correctly",
            a.sample_index, a.split
        );
    }
    let profile = net.filter_saliency_profile(&sample.image, sample.label)?;
    let scores = match a.method {
        Method::Pot => pot_saliency(&profile, &model)?,
        _ => zscore_saliency(&profile, &model)?,
    };
    let ranking = rank(&scores, &profile, a.method)?;
    let filters = net.architecture().filter_meta();
    let mut files = Files {
        inputs: vec![a.model.clone(), a.weights.clone()],
        ..Files::default()
    };
    match &a.out {
        Some(path) => {
            write_ranking_csv(create(path)?, &ranking, &filters, Some(a.top))?;
            files.outputs.push(path.clone());
            files.manifest = Some(sidecar(path));
        }
        None => write_ranking_csv(io::stdout().lock(), &ranking, &filters, Some(a.top))?,
    }
    Ok(files)
}

pub fn attribution_path(a: &EvalArgs) -> PathBuf {
    a.attribution_out
        .clone()
        .unwrap_or_else(|| a.out.with_extension("attribution.csv"))
}

fn eval(a: &EvalArgs) -> Outcome<Files> {
    let (net, _) = load_weights(&a.weights)?;
    let config = EvalConfig {
        method: a.method,
        max_filters: a.max_filters,
        lr: a.lr,
        random_seeds: a.seeds.clone(),
        quantile: a.quantile,
    };
    config.validate(net.num_filters())?;
    let model = a.model.as_deref().map(load_tail_model).transpose()?;
    let ranker = Ranker::from_config(&config, model.as_ref())?;
    let k = a.attribution_k.min(net.num_filters());

    let dataset = SyntheticDataset::generate(a.data_seed, a.split, a.num_samples);
    let misclassified = collect_misclassified(&net, &dataset)?;
    if misclassified.is_empty() {
        eprintln!("warning: no misclassified samples in split {}", a.split);
    }
    let report = run_sweep(a.experiment, &net, &misclassified, &ranker, &config)?;
    let shares = attribution_report(&net, &misclassified, &ranker, k)?;

    let attribution = attribution_path(a);
    let mut w = create(&a.out)?;
    write_report_csv(&mut w, &[report])?;
    w.flush()
        .map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    write_attribution_csv(create(&attribution)?, &[(a.method, k, shares)])?;

    let mut inputs = vec![a.weights.clone()];
    inputs.extend(a.model.clone());
    Ok(Files {
        inputs,
        outputs: vec![a.out.clone(), attribution],
        manifest: Some(sidecar(&a.out)),
    })
}

fn replay(path: &Path) -> Outcome {
    let recorded = read_manifest(path)?;
    let files = execute(&recorded.args)?;
    let fresh = RunManifest::new(&recorded.args, &files)?;
    let mut mismatched = Vec::new();
    for (old, new) in recorded.outputs.iter().zip(&fresh.outputs) {
        if old != new {
            mismatched.push(old.path.clone());
        }
    }
    if recorded.outputs.len() != fresh.outputs.len() {
        mismatched.push("<output list>".into());
    }
    if !mismatched.is_empty() {
        return Err(Failure::runtime(format!(
            "replay differs in {}",
            mismatched.join(", ")
        )));
    }
    eprintln!("reproduced {} output file(s)", fresh.outputs.len());
    Ok(())
}
