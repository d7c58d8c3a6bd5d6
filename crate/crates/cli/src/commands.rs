use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use primekit_core::data::{generate_split, ClassFilter, Dataset, SceneConfig, Split};
use primekit_core::eval::{
    block_ablation, compare_strategies, layer_ablation, metric_name, noise_sweep, EvalConfig, Strategy,
};
use primekit_core::nets::{build_toy_detector, build_toy_segmenter, BaseNetwork, Task};
use primekit_core::priming::{
    expand_block_mask, BlockMask, InitScheme, LayerMask, ModulationVariant, Placement, PrimingWeights,
};
use primekit_core::report;
use primekit_core::training::{train_base, train_priming, CueMode, TrainConfig};
use primekit_core::{Error, TensorArchive};

use crate::config::{parse_list, Config};
use crate::{Cli, CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

pub const DEFAULT_SIGMAS: &[f64] = &[0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0];
pub const DEFAULT_MASKS: &[&str] = &[
    "1111", "0111", "0011", "0001", "1000", "1100", "1110", "0100", "0010", "0000",
];

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for s in &cli.set {
        cfg.set(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set(&format!("seed={seed}"))?;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| io(&cli.out, e))?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::TrainBase { data } => cmd_train_base(&cfg, &data, out),
        Command::TrainPriming {
            data,
            base,
            mask,
            layers,
        } => cmd_train_priming(&cfg, &data, &base, mask, layers, out),
        Command::Eval {
            data,
            base,
            priming,
            strategies,
        } => cmd_eval(&cfg, &data, &base, priming.as_deref(), strategies, out),
        Command::Ablate {
            data,
            base,
            masks,
            prefixes,
        } => cmd_ablate(&cfg, &data, &base, masks, prefixes, out),
        Command::SweepNoise {
            data,
            base,
            priming,
            sigmas,
            strategies,
        } => cmd_sweep(&cfg, &data, &base, priming.as_deref(), sigmas, strategies, out),
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn seed(cfg: &Config) -> Result<u64> {
    cfg.value("seed", 0)
}

fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let defaults = SceneConfig::default();
    let scene = SceneConfig {
        image_size: cfg.value("data.image_size", defaults.image_size)?,
        n_classes: cfg.value("data.n_classes", defaults.n_classes)?,
        max_objects: cfg.value("data.max_objects", defaults.max_objects)?,
        min_scale: cfg.value("data.min_scale", defaults.min_scale)?,
        max_scale: cfg.value("data.max_scale", defaults.max_scale)?,
        ..defaults
    };
    let filter = match cfg.get("data.test_filter").unwrap_or("single") {
        "any" => ClassFilter::Any,
        "single" => ClassFilter::SingleClass,
        "two" => ClassFilter::DistinctClasses(2),
        other => return Err(CliError::Config(format!("data.test_filter: unknown {other:?}"))),
    };
    let seed = seed(cfg)?;
    let train_n = cfg.value("data.train", 2000usize)?;
    let test_n = cfg.value("data.test", 500usize)?;
    let ds = Dataset {
        n_classes: scene.n_classes,
        image_size: scene.image_size,
        train: generate_split(&scene, seed, Split::Train, train_n, ClassFilter::Any)?,
        test: generate_split(&scene, seed, Split::Test, test_n, filter)?,
    };
    log::info!("generated {} train / {} test scenes", ds.train.len(), ds.test.len());
    ds.save(out)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::load(dir)?)
}

fn task(cfg: &Config) -> Result<Task> {
    Ok(cfg.value("task", Task::Detection)?)
}

/// Training settings, with `<section>.lr` / `<section>.epochs` overriding
/// the shared `train.*` keys.
fn train_config(cfg: &Config, task: Task, section: &str) -> Result<TrainConfig> {
    let mut tc = match section {
        "base" => TrainConfig::for_base(task),
        _ => TrainConfig::for_priming(task),
    };
    tc.seed = seed(cfg)?;
    if let Some(lr) = cfg.first(&[&format!("{section}.lr"), "train.lr"])? {
        tc.learning_rate = lr;
    }
    if let Some(epochs) = cfg.first(&[&format!("{section}.epochs"), "train.epochs"])? {
        tc.epochs = epochs;
    }
    tc.momentum = cfg.value("train.momentum", tc.momentum)?;
    tc.batch_size = cfg.value("train.batch_size", tc.batch_size)?;
    tc.iterations = cfg.first(&["train.iterations"])?;
    tc.mode = cfg.value("prime.mode", CueMode::PlainCue)?;
    tc.variant = cfg.value("prime.variant", ModulationVariant::Residual)?;
    tc.placement = cfg.value("prime.placement", Placement::PreRelu)?;
    tc.init = match cfg.get("prime.init").unwrap_or("zero") {
        "zero" => InitScheme::Zero,
        "random" => InitScheme::SmallRandom {
            std: cfg.value("prime.init_std", 0.01)?,
        },
        other => return Err(CliError::Config(format!("prime.init: unknown {other:?}"))),
    };
    tc.validate()?;
    Ok(tc)
}

fn cmd_train_base(cfg: &Config, data: &Path, out: &Path) -> Result<()> {
    let ds = load_data(data)?;
    let task = task(cfg)?;
    let seed = seed(cfg)?;
    let net = match task {
        Task::Detection => build_toy_detector(ds.n_classes, ds.image_size, cfg.value("net.anchors", 1)?, seed)?,
        Task::Segmentation => build_toy_segmenter(ds.n_classes, ds.image_size, seed)?,
    };
    let tc = train_config(cfg, task, "base")?;
    let (trained, curve) = train_base(&net, &ds.train, &tc)?;
    trained.save(&out.join("base.prk"))?;
    report::write_loss_csv(&out.join("base_loss.csv"), &curve)?;
    Ok(())
}

fn load_base(path: &Path, ds: &Dataset) -> Result<BaseNetwork> {
    let net = BaseNetwork::load(path)?;
    if net.n_classes != ds.n_classes || net.image_size != ds.image_size {
        return Err(CliError::Core(Error::TaskMismatch(format!(
            "network expects {} classes at {}px, dataset has {} at {}px",
            net.n_classes, net.image_size, ds.n_classes, ds.image_size
        ))));
    }
    Ok(net)
}

fn priming_manifest_path(archive: &Path) -> PathBuf {
    archive.with_extension("manifest")
}

fn resolve_mask(net: &BaseNetwork, cfg: &Config, mask: Option<String>, layers: Option<String>) -> Result<(String, LayerMask)> {
    let mask = mask.or_else(|| cfg.get("prime.mask").map(str::to_string));
    let layers = layers.or_else(|| cfg.get("prime.layers").map(str::to_string));
    match (mask, layers) {
        (Some(_), Some(_)) => Err(CliError::Config("give either a block mask or a layer list, not both".into())),
        (Some(bits), None) => {
            let bm = BlockMask::parse(net.task, &bits)?;
            Ok((bm.to_string(), expand_block_mask(net, &bm)?))
        }
        (None, Some(list)) => {
            let lm = LayerMask::parse(net, &list)?;
            Ok(("-".into(), lm))
        }
        (None, None) => {
            let bits = "1".repeat(net.task.block_order().len());
            let bm = BlockMask::parse(net.task, &bits)?;
            Ok((bits, expand_block_mask(net, &bm)?))
        }
    }
}

fn cmd_train_priming(
    cfg: &Config,
    data: &Path,
    base: &Path,
    mask: Option<String>,
    layers: Option<String>,
    out: &Path,
) -> Result<()> {
    let ds = load_data(data)?;
    let net = load_base(base, &ds)?;
    let (block_bits, lm) = resolve_mask(&net, cfg, mask, layers)?;
    let tc = train_config(cfg, net.task, "prime")?;
    let (pw, curve) = train_priming(&net, &lm, &ds.train, &tc)?;
    let archive = out.join("priming.prk");
    pw.to_archive().save(&archive)?;
    let mut m = String::new();
    let _ = writeln!(m, "seed = {}", tc.seed);
    let _ = writeln!(m, "task = {}", net.task);
    let _ = writeln!(m, "mask = {block_bits}");
    let _ = writeln!(m, "layers = {lm}");
    let _ = writeln!(m, "mode = {}", tc.mode);
    let _ = writeln!(m, "lr = {}", tc.learning_rate);
    let _ = writeln!(m, "momentum = {}", tc.momentum);
    let _ = writeln!(m, "epochs = {}", tc.epochs);
    let _ = writeln!(m, "batch_size = {}", tc.batch_size);
    if let Some(it) = tc.iterations {
        let _ = writeln!(m, "iterations = {it}");
    }
    let _ = writeln!(m, "variant = {}", tc.variant);
    let _ = writeln!(m, "placement = {}", tc.placement);
    write_text(&priming_manifest_path(&archive), &m)?;
    report::write_loss_csv(&out.join("priming_loss.csv"), &curve)?;
    Ok(())
}

fn load_priming(path: &Path, net: &BaseNetwork) -> Result<PrimingWeights> {
    let archive = TensorArchive::load(path)?;
    let mpath = priming_manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| io(&mpath, e))?;
    let mut variant = ModulationVariant::Residual;
    let mut placement = Placement::PreRelu;
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        match k.trim() {
            "variant" => variant = v.trim().parse()?,
            "placement" => placement = v.trim().parse()?,
            "task" => {
                let t: Task = v.trim().parse()?;
                if t != net.task {
                    return Err(CliError::Core(Error::TaskMismatch(format!(
                        "priming weights were trained for a {t} network, base is {}",
                        net.task
                    ))));
                }
            }
            _ => {}
        }
    }
    Ok(PrimingWeights::from_archive(&archive, net, variant, placement)?)
}

fn eval_config(cfg: &Config) -> Result<EvalConfig> {
    let d = EvalConfig::default();
    Ok(EvalConfig {
        conf_threshold: cfg.value("eval.conf_threshold", d.conf_threshold)?,
        nms_iou: cfg.value("eval.nms_iou", d.nms_iou)?,
        iou_thresh: cfg.value("eval.iou_thresh", d.iou_thresh)?,
    })
}

fn strategies(cfg: &Config, flag: Option<String>, task: Task) -> Result<Vec<Strategy>> {
    let text = flag.or_else(|| cfg.get("eval.strategies").map(str::to_string));
    let list: Vec<Strategy> = match text {
        Some(t) => parse_list("strategies", &t).map_err(|_| {
            CliError::Config(format!("strategies: unknown name in {t:?}"))
        })?,
        None => Strategy::defaults(task).to_vec(),
    };
    if let Some(bad) = list.iter().find(|s| !s.applies_to(task)) {
        return Err(CliError::Core(Error::TaskMismatch(format!(
            "strategy {bad} does not apply to a {task} network"
        ))));
    }
    Ok(list)
}

fn cmd_eval(
    cfg: &Config,
    data: &Path,
    base: &Path,
    priming: Option<&Path>,
    flag: Option<String>,
    out: &Path,
) -> Result<()> {
    let ds = load_data(data)?;
    let net = load_base(base, &ds)?;
    let pw = priming.map(|p| load_priming(p, &net)).transpose()?;
    let list = strategies(cfg, flag, net.task)?;
    let table = compare_strategies(&net, pw.as_ref(), &ds.test, &list, &eval_config(cfg)?)?;
    report::write_strategy_csv(&out.join("eval.csv"), &table)?;
    Ok(())
}

fn cmd_ablate(
    cfg: &Config,
    data: &Path,
    base: &Path,
    masks: Option<String>,
    prefixes: Option<String>,
    out: &Path,
) -> Result<()> {
    let ds = load_data(data)?;
    let net = load_base(base, &ds)?;
    let tc = train_config(cfg, net.task, "prime")?;
    let ec = eval_config(cfg)?;
    let prefixes = prefixes.or_else(|| cfg.get("ablate.prefixes").map(str::to_string));
    let masks = masks.or_else(|| cfg.get("ablate.masks").map(str::to_string));
    let rows = match (masks, prefixes) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("give either block masks or layer prefixes, not both".into()))
        }
        (None, Some(p)) => {
            let ks: Vec<usize> = parse_list("prefixes", &p)?;
            layer_ablation(&net, &ds.train, &ds.test, &ks, &tc, &ec)?
        }
        (m, None) => {
            let bits: Vec<String> = match m {
                Some(t) => parse_list("masks", &t)?,
                None if net.task == Task::Detection => DEFAULT_MASKS.iter().map(|s| s.to_string()).collect(),
                None => ["111", "100", "010", "001", "000"].iter().map(|s| s.to_string()).collect(),
            };
            let bms = bits
                .iter()
                .map(|b| BlockMask::parse(net.task, b))
                .collect::<primekit_core::Result<Vec<_>>>()?;
            block_ablation(&net, &ds.train, &ds.test, &bms, &tc, &ec)?
        }
    };
    let metric = metric_name(net.task);
    report::write_ablation_csv(&out.join("ablation.csv"), &rows, metric)?;
    report::write_svg(&out.join("ablation.svg"), &report::ablation_svg(&rows, metric))?;
    Ok(())
}

fn cmd_sweep(
    cfg: &Config,
    data: &Path,
    base: &Path,
    priming: Option<&Path>,
    sigmas: Option<String>,
    flag: Option<String>,
    out: &Path,
) -> Result<()> {
    let ds = load_data(data)?;
    let net = load_base(base, &ds)?;
    let pw = priming.map(|p| load_priming(p, &net)).transpose()?;
    let sigmas: Vec<f64> = match sigmas.or_else(|| cfg.get("sweep.sigmas").map(str::to_string)) {
        Some(t) => parse_list("sigmas", &t)?,
        None => DEFAULT_SIGMAS.to_vec(),
    };
    let list = strategies(cfg, flag, net.task)?;
    let rows = noise_sweep(&net, pw.as_ref(), &ds.test, &sigmas, &list, &eval_config(cfg)?, seed(cfg)?)?;
    let metric = metric_name(net.task);
    report::write_sweep_csv(&out.join("sweep.csv"), &rows, metric)?;
    report::write_svg(&out.join("sweep.svg"), &report::sweep_svg(&rows, metric))?;
    Ok(())
}
