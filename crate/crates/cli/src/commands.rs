use std::path::{Path, PathBuf};

use sre_core::datasets::{self, DatasetManifest, Recipe, SplitMode};
use sre_core::encoders::{load_checkpoint, save_checkpoint};
use sre_core::geometry::FamilyKind;
use sre_core::index::{load_index, save_index, ShapeIndex};
use sre_core::io::write_atomic;
use sre_core::metrics::{evaluate, EvalQuery};
use sre_core::pipeline::{build_shape_index, query_for, view_queries, RetrievalTask};
use sre_core::seed;
use sre_core::trainer::{self, LossKind, OptimizerConfig, TrainConfig, TrainMode, TrainTuple};
use sre_core::{Embedding, EncoderDims, EncoderParams};

use crate::config::{Settings, ECHO_FILE};
use crate::{
    BuildIndexArgs, Choice, CliError, EvalArgs, GenDataArgs, LossArg, ManifestArg, ModeArg, OptimizerArg, QueryArgs,
    RecipeArg, SplitArg, TrainArgs,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.enck";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const RANKS_FILE: &str = "ranks.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

type Result<T> = std::result::Result<T, CliError>;

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn manifest_path(data: &Path, which: ManifestArg) -> PathBuf {
    let (all, train, test) = datasets::manifest_paths(data);
    match which {
        ManifestArg::All => all,
        ManifestArg::Train => train,
        ManifestArg::Test => test,
    }
}

fn load_split(data: &Path, which: ManifestArg) -> Result<(DatasetManifest, Vec<TrainTuple>)> {
    let manifest = DatasetManifest::read(&manifest_path(data, which))?;
    let tuples = datasets::load_tuples(&manifest, data)?;
    Ok((manifest, tuples))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let out: PathBuf = s.require("out", a.out.map(|p| p.display().to_string()))?.into();
    let recipe_name = s.get("recipe", a.recipe.map(Choice), Choice(RecipeArg::Default))?.0;
    let seed = s.seed(a.common.seed)?;
    let mut recipe = Recipe::default_with_seed(seed);
    if recipe_name == RecipeArg::All {
        recipe.name = "synthetic-all".into();
        recipe.families = FamilyKind::ALL.to_vec();
    }
    let default_families = recipe.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(",");
    let families = s.get("families", a.families, default_families)?;
    recipe.families = families
        .split(',')
        .map(|f| FamilyKind::parse(f.trim()))
        .collect::<sre_core::Result<Vec<_>>>()?;
    recipe.per_family = s.get("per-family", a.per_family, recipe.per_family)?;
    recipe.n_views = s.get("views", a.views, recipe.n_views)?;
    recipe.n_points = s.get("points", a.points, recipe.n_points)?;
    recipe.grid = s.get("grid", a.grid, recipe.grid)?;
    let split = s.get("split", a.split.map(Choice), Choice(SplitArg::ImageCentered))?.0;
    let fraction = s.get("fraction", a.fraction, 0.5)?;
    let force = s.switch("force", a.common.force)?;
    s.finish()?;

    let (all, train_path, test_path) = datasets::manifest_paths(&out);
    guard(&all, force)?;
    let manifest = datasets::gen_dataset(&recipe, &out)?;
    let mode = match split {
        SplitArg::ImageCentered => SplitMode::ImageCentered,
        SplitArg::ShapeCentered => SplitMode::ShapeCentered,
    };
    let (train, test) = datasets::split(&manifest, mode, fraction, seed)?;
    train.write(&train_path)?;
    test.write(&test_path)?;
    // The echo lives inside the dataset, so its own location is left out and
    // two trees generated from the same settings are byte-identical.
    s.omit("out");
    write_text(&out.join(ECHO_FILE), &s.render("gen-data"))?;
    println!(
        "wrote {} shapes, {} views to {} (train {} / test {} views)",
        manifest.shapes.len(),
        manifest.views.len(),
        out.display(),
        train.views.len(),
        test.views.len()
    );
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let data: PathBuf = s.require("data", a.data.map(|p| p.display().to_string()))?.into();
    let which = s.get("manifest", a.manifest.map(Choice), Choice(ManifestArg::Train))?.0;
    let out: PathBuf = s.require("out", a.out.map(|p| p.display().to_string()))?.into();
    let seed = s.seed(a.common.seed)?;
    let defaults = TrainConfig::default();
    let loss = s.get("loss", a.loss.map(Choice), Choice(LossArg::Infonce))?.0;
    let mode = s.get("mode", a.mode.map(Choice), Choice(ModeArg::PreAlign))?.0;
    let init = s.get("init", a.init, "scratch".to_string())?;
    let epochs = s.get("epochs", a.epochs, defaults.epochs)?;
    let batch_size = s.get("batch-size", a.batch_size, defaults.batch_size)?;
    let lr = s.get("lr", a.lr, defaults.optimizer.learning_rate)?;
    let optimizer = s.get("optimizer", a.optimizer.map(Choice), Choice(OptimizerArg::Adamw))?.0;
    let beta0 = s.get("beta0", a.beta0, defaults.beta0)?;
    let warmup = s.get("warmup", a.warmup, defaults.warmup_epochs)?;
    let dims_default = EncoderDims::default();
    let hidden = s.get("hidden", a.hidden, dims_default.hidden)?;
    let embed = s.get("embed", a.embed, dims_default.embed)?;
    let no_cache = s.switch("no-cache", a.no_cache)?;
    let eval_every = s.get("eval-every", a.eval_every, 0usize)?;
    let force = s.switch("force", a.common.force)?;
    s.finish()?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    guard(&ckpt_path, force)?;
    let (manifest, tuples) = load_split(&data, which)?;
    let dims = EncoderDims {
        hidden,
        embed,
        view: manifest.grid * manifest.grid,
    };
    let initial = if init == "scratch" {
        EncoderParams::init(dims, seed::derive(seed, &[seed::hash_str("init")]))
    } else {
        let p = load_checkpoint(Path::new(&init))?;
        if p.dims().view != dims.view {
            return Err(sre_core::Error::Dimension {
                expected: dims.view,
                actual: p.dims().view,
            }
            .into());
        }
        p
    };
    let config = TrainConfig {
        epochs,
        batch_size,
        optimizer: match optimizer {
            OptimizerArg::Adamw => OptimizerConfig::adamw(lr),
            OptimizerArg::Sgd => OptimizerConfig::sgd(lr),
        },
        loss: match loss {
            LossArg::Infonce => LossKind::InfoNce,
            LossArg::Hcl => LossKind::Hcl,
        },
        beta0,
        seed,
        mode: match mode {
            ModeArg::PreAlign => TrainMode::PreAlign,
            ModeArg::FineTune => TrainMode::FineTune,
        },
        warmup_epochs: warmup,
        use_cache: !no_cache,
        eval_every,
        ..defaults
    };
    let task = if eval_every > 0 {
        let (_, test) = load_split(&data, ManifestArg::Test)?;
        let (_, all) = load_split(&data, ManifestArg::All)?;
        Some(RetrievalTask::new(all, test, 10))
    } else {
        None
    };
    let outcome = trainer::train_with(&config, &tuples, &initial, task.as_ref(), &mut |r| {
        let eval = r
            .eval
            .as_ref()
            .map(|e| format!(" acc@1 {:.3}", e.instance.acc_top1))
            .unwrap_or_default();
        eprintln!(
            "epoch {:>4}  loss {:.4}  beta {:.2}  tau {:.4}{eval}",
            r.epoch, r.mean_loss, r.beta, r.tau
        );
    })?;
    let fp = save_checkpoint(&ckpt_path, &outcome.params)?;
    write_text(&out.join(TRAIN_LOG_FILE), &outcome.steps_jsonl())?;
    let epochs_log: String = outcome
        .epochs
        .iter()
        .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
        .collect();
    write_text(&out.join(EPOCH_LOG_FILE), &epochs_log)?;
    write_text(&out.join(ECHO_FILE), &s.render("train"))?;
    let last = outcome.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs, final loss {:.4}, checkpoint {} ({})",
        outcome.epochs.len(),
        last.mean_loss,
        ckpt_path.display(),
        fp
    );
    Ok(())
}

pub fn build_index(a: BuildIndexArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let checkpoint: PathBuf = s
        .require("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?
        .into();
    let data: PathBuf = s.require("data", a.data.map(|p| p.display().to_string()))?.into();
    let which = s.get("manifest", a.manifest.map(Choice), Choice(ManifestArg::All))?.0;
    let out: PathBuf = s.require("out", a.out.map(|p| p.display().to_string()))?.into();
    let force = s.switch("force", a.common.force)?;
    s.finish()?;

    guard(&out, force)?;
    let params = load_checkpoint(&checkpoint)?;
    let (_, tuples) = load_split(&data, which)?;
    let index = build_shape_index(&params, &tuples)?;
    save_index(&index, &out)?;
    let mut echo = out.clone().into_os_string();
    echo.push(".");
    echo.push(ECHO_FILE);
    write_text(Path::new(&echo), &s.render("build-index"))?;
    println!("indexed {} shapes into {} ({})", index.len(), out.display(), index.fingerprint());
    Ok(())
}

/// Loads an index and checkpoint, refusing mismatched fingerprints if strict.
fn open_index(index: &Path, checkpoint: &Path, strict: bool) -> Result<(ShapeIndex, EncoderParams)> {
    let params = load_checkpoint(checkpoint)?;
    let fp = params.fingerprint();
    let index = load_index(index, strict.then_some(fp))?;
    if index.fingerprint() != fp {
        eprintln!(
            "warning: index was built from checkpoint {}, querying with {}",
            index.fingerprint(),
            fp
        );
    }
    Ok((index, params))
}

pub fn query(a: QueryArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let index_path: PathBuf = s.require("index", a.index.map(|p| p.display().to_string()))?.into();
    let checkpoint: PathBuf = s
        .require("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?
        .into();
    let k = s.get("k", a.k, 10usize)?;
    let strict = s.switch("strict", a.strict)?;
    let view = match a.view {
        Some(path) => {
            s.get("view", Some(path.display().to_string()), String::new())?;
            datasets::read_vfeat(&path, 0)?
        }
        None => {
            let data: PathBuf = s.require("data", a.data.map(|p| p.display().to_string()))?.into();
            let shape: String = s.require("shape", a.shape)?;
            let v: usize = s.require("view-index", a.view_index)?;
            let (_, tuples) = load_split(&data, ManifestArg::All)?;
            let tuple = tuples
                .iter()
                .find(|t| t.shape_id == shape)
                .ok_or_else(|| CliError::Usage(format!("shape `{shape}` not in dataset")))?;
            tuple
                .views
                .iter()
                .find(|x| x.view_index == v)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("shape `{shape}` has no view {v}")))?
        }
    };
    let out = s.get("out", a.out.map(|p| p.display().to_string()), String::new())?;
    let force = s.switch("force", a.common.force)?;
    s.finish()?;

    let (index, params) = open_index(&index_path, &checkpoint, strict)?;
    let q = query_for(&params, "", "", &view)?;
    let result = index.query(&q.embedding, k)?;
    let mut listing = String::from("rank\tshape_id\tclass_id\tsimilarity\n");
    for (i, h) in result.hits.iter().enumerate() {
        listing.push_str(&format!("{}\t{}\t{}\t{:.6}\n", i + 1, h.shape_id, h.class_id, h.similarity));
    }
    if !out.is_empty() {
        let dir = PathBuf::from(out);
        guard(&dir.join("results.tsv"), force)?;
        write_text(&dir.join("results.tsv"), &listing)?;
        write_text(&dir.join(ECHO_FILE), &s.render("query"))?;
    }
    print!("{listing}");
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let index_path: PathBuf = s.require("index", a.index.map(|p| p.display().to_string()))?.into();
    let checkpoint: PathBuf = s
        .require("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?
        .into();
    let self_query = s.switch("self-query", a.self_query)?;
    let data = if self_query {
        None
    } else {
        Some(PathBuf::from(s.require::<String>("data", a.data.map(|p| p.display().to_string()))?))
    };
    let which = s.get("manifest", a.manifest.map(Choice), Choice(ManifestArg::Test))?.0;
    let k = s.get("k", a.k, 10usize)?;
    let strict = s.switch("strict", a.strict)?;
    let out: PathBuf = s.require("out", a.out.map(|p| p.display().to_string()))?.into();
    let force = s.switch("force", a.common.force)?;
    s.finish()?;

    guard(&out.join(REPORT_FILE), force)?;
    let (index, params) = open_index(&index_path, &checkpoint, strict)?;
    let queries: Vec<EvalQuery> = match &data {
        None => index
            .entries()
            .iter()
            .map(|e| EvalQuery {
                embedding: Embedding::normalized(&e.values.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()),
                shape_id: e.shape_id.clone(),
                class_id: e.class_id.clone(),
            })
            .collect(),
        Some(dir) => view_queries(&params, &load_split(dir, which)?.1)?,
    };
    let report = evaluate(&index, &queries, k)?;
    write_text(&out.join(REPORT_FILE), &report.to_jsonl())?;
    write_text(&out.join(RANKS_FILE), &report.ranks_jsonl())?;
    write_text(&out.join(SUMMARY_FILE), &report.summary_table())?;
    write_text(&out.join(ECHO_FILE), &s.render("eval"))?;
    print!("{}", report.summary_table());
    Ok(())
}
