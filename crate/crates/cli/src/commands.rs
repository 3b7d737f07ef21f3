//! The five subcommands: search, train, eval, params, features.

use std::path::Path;

use cellsearch_audio::wav;
use cellsearch_core::checkpoint::Checkpoint;
use cellsearch_core::genotype::{
    count_parameters, derive_genotype, instantiate_network, parse_genotype, param_breakdown,
    serialize_genotype, train_final, NetworkPlan,
};
use cellsearch_core::nn::{Init, ParamStore};
use cellsearch_core::search::{evaluate_split, run_search};
use cellsearch_core::supernet::SupernetConfig;
use cellsearch_core::synthetic::{SyntheticConfig, SyntheticDataset};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::runs::{write_snapshot, RunLock};
use crate::speech::{DataSource, SpeechSource};
use crate::CliError;

pub const GENOTYPE_FILE: &str = "best.genotype";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.txt";

fn open_data(cfg: &RunConfig) -> Result<DataSource, CliError> {
    cfg.require_data()?;
    if cfg.synthetic {
        let s = &cfg.synthetic_data;
        Ok(DataSource::Synthetic(SyntheticDataset::new(SyntheticConfig {
            classes: s.classes,
            train: s.train,
            val: s.val,
            test: s.test,
            feat_h: s.feat_h,
            feat_w: s.feat_w,
            noise: s.noise,
            seed: cfg.seed,
        })))
    } else {
        let root = cfg.data_root.as_deref().expect("require_data checked");
        Ok(DataSource::Speech(SpeechSource::open(root, cfg.seed, cfg.class_balance)?))
    }
}

fn data_classes(cfg: &RunConfig) -> usize {
    if cfg.synthetic {
        cfg.synthetic_data.classes
    } else {
        cellsearch_audio::dataset::NUM_CLASSES
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn cmd_search(cfg: &RunConfig) -> Result<(), CliError> {
    let op_set = cfg.op_set()?;
    let search_cfg = cfg.search_config();
    search_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let net_cfg = SupernetConfig {
        num_cells: cfg.supernet.num_cells,
        init_channels: cfg.supernet.init_channels,
        num_classes: data_classes(cfg),
        op_set,
    };
    net_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.supernet.num_classes != net_cfg.num_classes {
        return Err(CliError::Config(format!(
            "supernet.num_classes is {} but the dataset has {} classes",
            cfg.supernet.num_classes, net_cfg.num_classes
        )));
    }
    let mut data = open_data(cfg)?;
    let out = cfg.require_out_dir()?;
    let _lock = RunLock::acquire(out)?;
    write_snapshot(out, &cfg.snapshot())?;

    let outcome =
        run_search::<f32>(data.as_batch_source(), &search_cfg, net_cfg, Some(out)).map_err(runtime)?;
    let genotype = derive_genotype(&outcome.alpha_normal, &outcome.alpha_reduce, op_set);
    let genotype_path = out.join(GENOTYPE_FILE);
    std::fs::write(&genotype_path, serialize_genotype(&genotype)).map_err(runtime)?;

    if let Some(last) = outcome.history.last() {
        println!(
            "search finished: epochs={} train_loss={:.4} val_loss={:.4} val_acc={:.4} alpha_entropy={:.4}",
            outcome.history.len(),
            last.train_loss,
            last.val_loss,
            last.val_acc,
            last.alpha_entropy
        );
    }
    println!("genotype written to {}", genotype_path.display());
    println!("metrics written to {}", out.join("metrics.csv").display());
    Ok(())
}

/// Sidecar describing how to rebuild a checkpointed model.
#[derive(Serialize, Deserialize)]
struct PlanFile {
    depth: usize,
    channels: usize,
    num_classes: usize,
    genotype: String,
}

fn plan_sidecar_path(model_path: &Path) -> std::path::PathBuf {
    model_path.with_extension("plan.toml")
}

fn load_plan_sidecar(model_path: &Path) -> Result<NetworkPlan, CliError> {
    let sidecar = plan_sidecar_path(model_path);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| {
        CliError::Config(format!("cannot read plan sidecar {}: {e}", sidecar.display()))
    })?;
    let plan_file: PlanFile = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("invalid plan sidecar {}: {e}", sidecar.display())))?;
    let genotype = parse_genotype(&plan_file.genotype).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(NetworkPlan {
        genotype,
        depth: plan_file.depth,
        init_channels: plan_file.channels,
        num_classes: plan_file.num_classes,
    })
}

fn format_report(cfg: &RunConfig, plan: &NetworkPlan, test_accuracy: f64, final_epochs: usize) -> String {
    let params = count_parameters(plan);
    let mut out = String::new();
    out.push_str(&format!("test_accuracy={test_accuracy}\n"));
    out.push_str(&format!("parameters={params}\n"));
    out.push_str(&format!("parameters_k={:.1}\n", params as f64 / 1000.0));
    out.push_str(&format!("depth={}\n", plan.depth));
    out.push_str(&format!("channels={}\n", plan.init_channels));
    out.push_str(&format!("num_classes={}\n", plan.num_classes));
    out.push_str(&format!("op_set={}\n", plan.genotype.op_set.name()));
    out.push_str(&format!("final_epochs={final_epochs}\n"));
    out.push_str(&format!("seed={}\n", cfg.seed));
    out.push_str("[stacking]\n");
    for (i, reduction) in plan.cell_kinds().iter().enumerate() {
        out.push_str(&format!("cell {i}: {}\n", if *reduction { "reduction" } else { "normal" }));
    }
    out
}

pub fn cmd_train(cfg: &RunConfig, genotype_path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(genotype_path).map_err(|e| {
        CliError::Config(format!("cannot read genotype {}: {e}", genotype_path.display()))
    })?;
    let genotype = parse_genotype(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let plan = NetworkPlan {
        genotype,
        depth: cfg.plan.depth,
        init_channels: cfg.plan.channels,
        num_classes: data_classes(cfg),
    };
    plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let mut data = open_data(cfg)?;
    let out = cfg.require_out_dir()?;
    let _lock = RunLock::acquire(out)?;
    write_snapshot(out, &cfg.snapshot())?;

    let search_cfg = cfg.search_config();
    let epochs = cfg.final_train.epochs;
    let model =
        train_final::<f32>(plan.clone(), data.as_batch_source(), &search_cfg, epochs).map_err(runtime)?;

    let model_path = out.join(MODEL_FILE);
    Checkpoint::from_store(&model.store).save(&model_path).map_err(runtime)?;
    let sidecar = PlanFile {
        depth: plan.depth,
        channels: plan.init_channels,
        num_classes: plan.num_classes,
        genotype: serialize_genotype(&plan.genotype),
    };
    std::fs::write(
        plan_sidecar_path(&model_path),
        toml::to_string(&sidecar).expect("plan serializes"),
    )
    .map_err(runtime)?;

    let report = format_report(cfg, &plan, model.test_accuracy, epochs);
    std::fs::write(out.join(REPORT_FILE), &report).map_err(runtime)?;
    print!("{report}");
    println!("model written to {}", model_path.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, model_path: &Path) -> Result<(), CliError> {
    let plan = load_plan_sidecar(model_path)?;
    let ckpt = Checkpoint::load(model_path).map_err(|e| CliError::Config(e.to_string()))?;
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(cfg.seed, "final");
    let net = instantiate_network(&mut store, &mut init, plan).map_err(|e| CliError::Config(e.to_string()))?;
    ckpt.apply_to_store(&mut store).map_err(|e| CliError::Config(e.to_string()))?;

    let mut data = open_data(cfg)?;
    let names = data.class_names();
    let stats = evaluate_split(
        |fwd, x| net.forward(fwd, x),
        &mut store,
        data.as_batch_source(),
        cellsearch_core::data::Split::Test,
        cfg.search.batch_size,
        0,
    )
    .map_err(runtime)?;

    println!("test_accuracy={}", stats.accuracy);
    println!("test_examples={}", stats.count);
    println!("confusion_matrix (rows: true, cols: predicted)");
    let width = names.iter().map(|n| n.len()).max().unwrap_or(8).max(6);
    print!("{:>width$} ", "");
    for name in &names {
        print!("{name:>width$} ");
    }
    println!();
    for (label, row) in stats.confusion.iter().enumerate() {
        print!("{:>width$} ", names[label]);
        for v in row {
            print!("{v:>width$} ");
        }
        println!();
    }
    if let Some(out) = cfg.out_dir.as_deref() {
        std::fs::create_dir_all(out).map_err(runtime)?;
        let mut text = format!("test_accuracy={}\ntest_examples={}\n", stats.accuracy, stats.count);
        for (label, row) in stats.confusion.iter().enumerate() {
            text.push_str(&format!(
                "{},{}\n",
                names[label],
                row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            ));
        }
        std::fs::write(out.join("eval.txt"), text).map_err(runtime)?;
    }
    Ok(())
}

pub fn cmd_params(cfg: &RunConfig, genotype_path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(genotype_path).map_err(|e| {
        CliError::Config(format!("cannot read genotype {}: {e}", genotype_path.display()))
    })?;
    let genotype = parse_genotype(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let plan = NetworkPlan {
        genotype,
        depth: cfg.plan.depth,
        init_channels: cfg.plan.channels,
        num_classes: cfg.supernet.num_classes,
    };
    plan.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let breakdown = param_breakdown(&plan);
    println!("module            params");
    println!("head              {}", breakdown.head);
    for (i, (reduction, p)) in breakdown.cells.iter().enumerate() {
        let kind = if *reduction { "reduction" } else { "normal" };
        println!("cell {i:<2} {kind:<9} {p}");
    }
    println!("classifier        {}", breakdown.classifier);
    println!("total_k           {:.1}", breakdown.total as f64 / 1000.0);
    println!("total_params={}", breakdown.total);
    Ok(())
}

pub fn cmd_features(wav_path: &Path, out_path: &Path) -> Result<(), CliError> {
    let clip = wav::load_wav(wav_path).map_err(|e| CliError::Config(e.to_string()))?;
    let clip = clip.one_second();
    let cfg = cellsearch_audio::MfccConfig::default();
    let features = cellsearch_audio::mfcc::extract_mfcc(&clip, &cfg)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut text = String::new();
    for t in 0..features.frames() {
        let row: Vec<String> = features.row(t).iter().map(|v| v.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(out_path, text).map_err(runtime)?;
    println!(
        "features written to {} ({} frames x {} coefficients)",
        out_path.display(),
        features.frames(),
        features.coeffs()
    );
    Ok(())
}
