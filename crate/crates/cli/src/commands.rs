use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pathcaps::autodiff::FaultyRule;
use pathcaps::capsules::{self, RoutingMode};
use pathcaps::data::{self, Dataset, SplitConfig};
use pathcaps::model::{
    self, check_parameter_gradients_with, count_parameters, init_params, Architecture, Masks, NetworkSpec,
    Sweep,
};
use pathcaps::paths::{self, PathMask, PathVariant};
use pathcaps::pgm;
use pathcaps::rng;
use pathcaps::train::{self, Datasets, TrainOutcome};
use pathcaps::Tensor;
use rand::Rng;

use crate::config::{RunConfig, DATA_DIR_ENV};
use crate::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "config.json";
pub const TRIALS_FILE: &str = "trials.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// `1234567` → `"1,234,567"`.
pub fn grouped(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Sample mean and sample (n−1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Train/validation/test sets as selected by `cfg.data`.
pub fn load_datasets(cfg: &RunConfig, dir: &Path) -> Result<Datasets, CliError> {
    let full = Dataset::load_mnist_train(dir)?;
    let split = SplitConfig {
        val_fraction: cfg.data.val_fraction,
        seed: cfg.data.split_seed,
    };
    let (mut train_idx, mut val_idx) = data::split_indices(full.len(), &split);
    if let Some(n) = cfg.data.train_limit {
        train_idx.truncate(n);
    }
    if let Some(n) = cfg.data.val_limit {
        val_idx.truncate(n);
    }
    let test = Dataset::load_mnist_test(dir)?;
    let test = match cfg.data.test_limit {
        Some(n) => test.head(n)?,
        None => test,
    };
    Ok(Datasets {
        train: full.subset(&train_idx)?,
        validation: full.subset(&val_idx)?,
        test: Some(test),
    })
}

fn describe(spec: &NetworkSpec) -> String {
    let arch = match spec.architecture {
        Architecture::PathCapsNet { paths, variant } => format!("PathCapsNet-{paths} ({variant} paths)"),
        Architecture::CapsNetBaseline => "CapsNet baseline".to_string(),
    };
    let drop = if spec.drop_circuit.enabled {
        format!(", DropCircuit p={}", spec.drop_circuit.drop_prob)
    } else {
        String::new()
    };
    let recon = if spec.reconstruction { ", reconstruction" } else { "" };
    format!("{arch}, {} routing x{}{drop}{recon}", spec.routing, spec.iterations)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.data_dir()?;
    let datasets = load_datasets(cfg, &dir)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let mut resolved = cfg.clone();
    resolved.data.dir = Some(dir);
    write(&cfg.out_dir.join(RESOLVED_CONFIG_FILE), &resolved.to_json())?;

    let train_cfg = cfg.train_config();
    println!(
        "training on {} images, validating on {}, testing on {}",
        datasets.train.len(),
        datasets.validation.len(),
        datasets.test.as_ref().map_or(0, Dataset::len)
    );
    let mut outcomes: Vec<(u64, TrainOutcome)> = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let seed = cfg.seed + trial as u64;
        let spec = cfg.network_spec(seed);
        let out_dir = if cfg.trials == 1 {
            cfg.out_dir.clone()
        } else {
            cfg.out_dir.join(format!("trial-{trial}"))
        };
        println!("{} seed {seed}", describe(&spec));
        let epochs = train_cfg.epochs;
        let outcome = train::train_with(&spec, &datasets, &train_cfg, &out_dir, |r| {
            let mut line = format!(
                "epoch {}/{epochs}  margin loss {:.5}",
                r.epoch, r.train_margin_loss
            );
            if let Some(l) = r.train_recon_loss {
                let _ = write!(line, "  recon loss {l:.5}");
            }
            let _ = write!(line, "  val error {:.2}%", r.val_error_pct);
            if let Some(t) = r.test_error_pct {
                let _ = write!(line, "  test error {t:.2}%");
            }
            eprintln!("{line}");
        })?;
        println!(
            "best epoch {}: validation error {:.2}%, test error {}",
            outcome.best.epoch,
            outcome.best_val_error_pct,
            outcome
                .best_test_error_pct
                .map_or_else(|| "n/a".to_string(), |t| format!("{t:.2}%"))
        );
        println!("wrote {} and {}", outcome.metrics_path.display(), outcome.checkpoint_path.display());
        outcomes.push((seed, outcome));
    }

    if cfg.trials > 1 {
        let mut csv = String::from("trial,seed,best_epoch,val_error_pct,test_error_pct\n");
        for (k, (seed, o)) in outcomes.iter().enumerate() {
            let test = o.best_test_error_pct.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{k},{seed},{},{},{test}", o.best.epoch, o.best_val_error_pct);
        }
        write(&cfg.out_dir.join(TRIALS_FILE), &csv)?;
        let tests: Vec<f64> = outcomes.iter().filter_map(|(_, o)| o.best_test_error_pct).collect();
        let (mean, std) = mean_std(&tests);
        println!(
            "test error over {} trials: {mean:.2}% ± {:.2}",
            tests.len(),
            std.unwrap_or(0.0)
        );
    }
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub test_limit: Option<usize>,
    pub batch_size: usize,
    pub out_dir: Option<PathBuf>,
}

fn data_dir_or_env(dir: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    dir.clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = train::load_checkpoint(&args.checkpoint)?;
    let test = Dataset::load_mnist_test(data_dir_or_env(&args.data_dir)?)?;
    let test = match args.test_limit {
        Some(n) => test.head(n)?,
        None => test,
    };
    let ev = train::evaluate(&ckpt.spec, &ckpt.params, &test, args.batch_size)?;
    let wrong = ev.predictions.iter().zip(&test.labels).filter(|(p, l)| p != l).count();
    println!("{}", describe(&ckpt.spec));
    println!("test error: {:.2}% ({wrong} of {} wrong)", ev.error_pct, test.len());

    let out_dir = match &args.out_dir {
        Some(d) => d.clone(),
        None => args
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let recon = ev.recon_loss.map(|r| r.to_string()).unwrap_or_default();
    let csv = format!(
        "checkpoint,epoch,samples,error_pct,margin_loss,recon_loss\n{},{},{},{},{},{recon}\n",
        args.checkpoint.display(),
        ckpt.epoch,
        test.len(),
        ev.error_pct,
        ev.margin_loss
    );
    write(&out_dir.join(EVAL_FILE), &csv)
}

pub fn cmd_params(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.network_spec(cfg.seed);
    let count = count_parameters(&spec);
    let features = match spec.architecture {
        Architecture::PathCapsNet { paths, .. } => format!("paths ({paths} x {})", grouped(count.features / paths)),
        Architecture::CapsNetBaseline => "conv stem + primary conv".to_string(),
    };
    println!("{}", describe(&spec));
    println!("{:<28}{:>12}", features, grouped(count.features));
    println!("{:<28}{:>12}", "routing weights", grouped(count.routing));
    println!("{:<28}{:>12}", "decoder", grouped(count.decoder));
    println!("{:<28}{:>12}", "total", grouped(count.total()));
    if let Architecture::PathCapsNet {
        variant: PathVariant::Table1Literal,
        ..
    } = spec.architecture
    {
        let literal = paths::default_path_spec(PathVariant::Table1Literal).param_count();
        let matched = paths::default_path_spec(PathVariant::Table2Matched).param_count();
        println!(
            "note: the table1 path layout has {} parameters per path; the published model sizes \
             correspond to {} per path (--variant table2), so this total does not match them",
            grouped(literal),
            grouped(matched)
        );
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Corruption {
    Squash,
    Softmax,
    Conv2d,
}

impl From<Corruption> for FaultyRule {
    fn from(c: Corruption) -> Self {
        match c {
            Corruption::Squash => FaultyRule::Squash,
            Corruption::Softmax => FaultyRule::Softmax,
            Corruption::Conv2d => FaultyRule::Conv2d,
        }
    }
}

pub struct GradcheckArgs {
    pub seed: u64,
    pub iterations: usize,
    pub routing: Option<RoutingMode>,
    pub coords: usize,
    pub eps: f64,
    pub corrupt: Option<Corruption>,
}

/// Worst coordinate of one routing mode.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub routing: RoutingMode,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: String,
    /// Every checked coordinate of the dropped path had a zero gradient.
    pub dropped_path_zero: bool,
    /// Max relative error of each building-block check.
    pub components: Vec<(&'static str, f64)>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_THRESHOLD
            && self.components.iter().all(|&(_, e)| e < GRADCHECK_THRESHOLD)
            && self.dropped_path_zero
    }
}

/// Finite-difference checks of the model's building blocks at unit scale,
/// where a proportional error in any backward rule is far above the
/// threshold. Gradients of the full model are mostly well below 1, so
/// `max(1, |analytic|)` turns the model-level check into an absolute one.
fn component_errors(args: &GradcheckArgs, routing: RoutingMode) -> Result<Vec<(&'static str, f64)>, CliError> {
    let mut r = rng::stream(args.seed, "gradcheck", 3);
    let mut normal = |shape: &[usize]| -> Result<Tensor, CliError> {
        let n = shape.iter().product();
        Ok(Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.5..1.5)).collect())?)
    };
    let fault = args.corrupt.map(FaultyRule::from);
    let (eps, iterations) = (args.eps, args.iterations);
    let arm = move |g: &mut pathcaps::autodiff::Graph| {
        if let Some(rule) = fault {
            g.inject_fault(rule);
        }
    };

    let image = normal(&[1, 2, 8, 8])?;
    let kernel = normal(&[3, 2, 3, 3])?;
    let bias = normal(&[3])?;
    let pooled_weights = normal(&[1, 3, 4, 4])?;
    let conv_chain = |g: &mut pathcaps::autodiff::Graph, x, k| -> pathcaps::Result<_> {
        let b = g.constant(bias.clone());
        let y = g.conv2d(x, k, b, 1, 1)?;
        let y = g.relu(y);
        let y = g.maxpool2d(y, 2, 2)?;
        let w = g.constant(pooled_weights.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum_all(y))
    };
    let conv_input = pathcaps::autodiff::finite_diff_check(
        |g, x| {
            arm(g);
            let k = g.constant(kernel.clone());
            conv_chain(g, x, k)
        },
        &image,
        eps,
    )?;
    let conv_kernel = pathcaps::autodiff::finite_diff_check(
        |g, k| {
            arm(g);
            let x = g.constant(image.clone());
            conv_chain(g, x, k)
        },
        &kernel,
        eps,
    )?;

    let features = normal(&[2, 5])?;
    let dense_bias = normal(&[4])?;
    let out_weights = normal(&[2, 4])?;
    let dense = pathcaps::autodiff::finite_diff_check(
        |g, w| {
            arm(g);
            let x = g.constant(features.clone());
            let b = g.constant(dense_bias.clone());
            let y = g.dense(x, w, b)?;
            let y = g.sigmoid(y);
            let o = g.constant(out_weights.clone());
            let y = g.mul(y, o)?;
            Ok(g.sum_all(y))
        },
        &normal(&[4, 5])?,
        eps,
    )?;

    // 3 primaries, 2 digits, 2-D inputs, 4-D outputs.
    let primaries = normal(&[1, 3, 2])?;
    let routed_weights = normal(&[1, 2, 4])?;
    let routed = pathcaps::autodiff::finite_diff_check(
        |g, w| {
            arm(g);
            let u = g.constant(primaries.clone());
            let u = capsules::squash(g, u)?;
            let uhat = capsules::predict(g, u, w)?;
            let (v, _) = capsules::route(g, uhat, routing, iterations)?;
            let o = g.constant(routed_weights.clone());
            let y = g.mul(v, o)?;
            Ok(g.sum_all(y))
        },
        &normal(&[3, 2, 4, 2])?,
        eps,
    )?;
    Ok(vec![
        ("conv input", conv_input),
        ("conv kernel", conv_kernel),
        ("dense", dense),
        ("routing", routed),
    ])
}

/// Two paths (the second dropped by DropCircuit), one sample, with the
/// reconstruction decoder attached.
pub fn gradcheck_mode(args: &GradcheckArgs, routing: RoutingMode) -> Result<GradcheckReport, CliError> {
    let mut spec = NetworkSpec::path_caps(2, PathVariant::Table2Matched, routing);
    spec.iterations = args.iterations;
    spec.reconstruction = true;
    spec.drop_circuit.enabled = true;
    spec.seed = args.seed;
    spec.validate()?;

    let mut params = init_params(&spec);
    // Zero biases leave pre-activations exactly at the ReLU kink wherever
    // the input is blank; nudge them off it.
    let mut r = rng::stream(args.seed, "gradcheck", 1);
    for i in 0..params.len() {
        if params.name(i).ends_with(".bias") {
            for v in params.tensor_mut(i).data_mut() {
                *v = r.gen_range(-0.05..0.05);
            }
        }
    }
    let mut r = rng::stream(args.seed, "gradcheck", 0);
    let image = Tensor::new(&[1, 1, 28, 28], (0..784).map(|_| r.gen::<f64>()).collect())?;
    let labels = [(args.seed % 10) as usize];
    let masks = Masks::Minibatch(PathMask {
        keep: vec![true, false],
        attempts: 1,
    });

    let mut r = rng::stream(args.seed, "gradcheck", 2);
    let coords: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|p| {
            let n = params.tensor(p).len();
            (0..args.coords).map(|_| (p, r.gen_range(0..n))).collect::<Vec<_>>()
        })
        .collect();
    let checks = check_parameter_gradients_with(
        &spec,
        &params,
        &image,
        &labels,
        &masks,
        &coords,
        args.eps,
        args.corrupt.map(FaultyRule::from),
    )?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
        .expect("at least one coordinate");
    let dropped_path_zero = checks
        .iter()
        .filter(|c| c.param.starts_with("path1."))
        .all(|c| c.analytic == 0.0);
    Ok(GradcheckReport {
        routing,
        checked: checks.len(),
        max_relative_error: worst.relative_error,
        worst: format!(
            "{}[{}] analytic {:.6e} numeric {:.6e}",
            worst.param, worst.index, worst.analytic, worst.numeric
        ),
        dropped_path_zero,
        components: component_errors(args, routing)?,
    })
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    if args.coords == 0 {
        return Err(CliError::Usage("--coords must be at least 1".into()));
    }
    let modes = match args.routing {
        Some(m) => vec![m],
        None => vec![RoutingMode::FanIn, RoutingMode::FanOut],
    };
    let mut all_passed = true;
    for mode in modes {
        let report = gradcheck_mode(args, mode)?;
        let verdict = if report.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {mode}: {} coordinates, {} iterations, max relative error {:.3e} (threshold {:.0e})",
            report.checked, args.iterations, report.max_relative_error, GRADCHECK_THRESHOLD
        );
        println!("     worst {}", report.worst);
        let parts: Vec<String> = report.components.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
        println!("     components: {}", parts.join(", "));
        if !report.dropped_path_zero {
            println!("     dropped path received a nonzero gradient");
        }
        all_passed &= report.passed();
    }
    if all_passed {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

pub struct PerturbArgs {
    pub checkpoint: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub image_index: usize,
    pub digit: Option<usize>,
    pub dims: Vec<usize>,
    pub sweep: Sweep,
    pub out: PathBuf,
}

pub fn cmd_perturb(args: &PerturbArgs) -> Result<(), CliError> {
    let ckpt = train::load_checkpoint(&args.checkpoint)?;
    if !ckpt.spec.reconstruction {
        return Err(CliError::Usage(format!(
            "{} was trained without the reconstruction decoder; perturbation needs a --recon model",
            args.checkpoint.display()
        )));
    }
    let test = Dataset::load_mnist_test(data_dir_or_env(&args.data_dir)?)?;
    if args.image_index >= test.len() {
        return Err(CliError::Usage(format!(
            "--image-index {} is out of range for {} test images",
            args.image_index,
            test.len()
        )));
    }
    let image = test.images.slice_batch(args.image_index)?;
    let grid = model::perturb_digitcaps(&ckpt.spec, &ckpt.params, &image, args.digit, &args.dims, args.sweep)?;
    let (img, layout) = pgm::grid_image(&grid, 2);
    pgm::write_pgm(&args.out, &img)?;
    println!(
        "wrote {}: {} rows x {} columns (input, reconstruction, {} sweep values) for digit {}",
        args.out.display(),
        layout.rows,
        layout.cols,
        grid.values.len(),
        grid.digit
    );
    Ok(())
}
