use std::fs;
use std::path::PathBuf;

use corrnet::data::{self, PairRecord};
use corrnet::eval::{self, EvalConfig, Method, MethodEvaluation};
use corrnet::training::{self, Model, Variant};
use corrnet::Execution;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::{AblateArgs, BenchArgs, Cli, EvalArgs, InferArgs, SynthArgs, TrainArgs};

pub struct Context {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub exec: Execution,
}

fn setup_workers(requested: Option<usize>) -> Result<Execution> {
    let workers = requested.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(CliError::config("--workers must be >= 1"));
    }
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            // Fails only if a pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
            return Ok(Execution::Parallel);
        }
    }
    Ok(Execution::Sequential)
}

impl Context {
    pub fn new(cli: &Cli, cfg: RunConfig) -> Result<Self> {
        let exec = setup_workers(cli.workers)?;
        let run_dir = match &cli.run_dir {
            Some(d) => d.clone(),
            None => PathBuf::from("runs").join(format!(
                "{}-s{}",
                chrono::Local::now().format("%Y%m%d-%H%M%S"),
                cfg.seed
            )),
        };
        fs::create_dir_all(&run_dir)?;
        fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
        Ok(Self { cfg, run_dir, data_dir: cli.data_dir.clone(), exec })
    }

    fn data_root(&self, flag: &Option<PathBuf>) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| self.data_dir.clone())
            .ok_or_else(|| CliError::config("no dataset given: pass --data or set CORRNET_DATA_DIR"))
    }

    /// Loads `split` from a dataset directory, or the file itself.
    fn load(&self, flag: &Option<PathBuf>, split: &str) -> Result<Vec<PairRecord>> {
        let root = self.data_root(flag)?;
        let path = if root.is_dir() { root.join(format!("{split}.bin")) } else { root };
        let mut recs = data::load_pairs(&path)?;
        if self.cfg.eval.limit > 0 && split == "test" {
            recs.truncate(self.cfg.eval.limit);
        }
        Ok(recs)
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            robust: self.cfg.robust_config(),
            keep_threshold: self.cfg.eval.keep_threshold,
            execution: self.exec,
        }
    }
}

fn load_checkpoint(path: &Option<PathBuf>) -> Result<Option<Model>> {
    path.as_ref()
        .map(|p| training::load_model(p).map(|(m, _)| m).map_err(CliError::from))
        .transpose()
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<()> {
    let out = args
        .out
        .clone()
        .or_else(|| ctx.data_dir.clone())
        .unwrap_or_else(|| ctx.run_dir.join("data"));
    let paths = data::generate_dataset(
        &ctx.cfg.synth_config(),
        ctx.cfg.split_counts(),
        ctx.cfg.seed,
        &out,
        ctx.exec,
    )?;
    for p in paths {
        let recs = data::load_pairs(&p)?;
        let sum = recs.iter().fold(0u64, |h, r| h.rotate_left(5) ^ data::record_checksum(r));
        println!("{}\t{} pairs\tchecksum {sum:016x}", p.display(), recs.len());
    }
    Ok(())
}

pub fn train(ctx: &Context, args: &TrainArgs) -> Result<()> {
    let tr = ctx.load(&args.data, "train")?;
    let va = ctx.load(&args.data, "val")?;
    let tc = ctx.cfg.train_config()?;
    let rep = training::train(ctx.exec, &tr, &va, &tc, &ctx.run_dir)?;
    println!("run directory\t{}", ctx.run_dir.display());
    println!("best step\t{}", rep.best_step);
    if let Some(m) = rep.best_metrics {
        println!(
            "best val\tf1 {:.4}\tmap5 {:.4}\tmap10 {:.4}\tmap20 {:.4}",
            m.f1, m.map5, m.map10, m.map20
        );
    }
    println!("degenerate solves\t{}", rep.degenerate_total);
    Ok(())
}

pub fn infer(ctx: &Context, args: &InferArgs) -> Result<()> {
    let (model, _) = training::load_model(&args.checkpoint)?;
    let recs = data::load_pairs(&args.pairs)?;
    let mut weights = csv::Writer::from_path(ctx.run_dir.join("weights.csv"))?;
    weights.write_record(["pair_id", "index", "logit", "weight"])?;
    let mut ess = csv::Writer::from_path(ctx.run_dir.join("essentials.csv"))?;
    let mut header = vec!["pair_id".to_string(), "failed".to_string()];
    header.extend((0..3).flat_map(|i| (0..3).map(move |j| format!("e{i}{j}"))));
    ess.write_record(&header)?;
    let preds = ctx.exec.map(recs.len(), |i| model.predict(Execution::Sequential, &recs[i].correspondences));
    for (rec, pred) in recs.iter().zip(&preds) {
        for (i, (o, w)) in pred.logits.iter().zip(&pred.weights).enumerate() {
            weights.write_record([rec.id.to_string(), i.to_string(), format!("{o:?}"), format!("{w:?}")])?;
        }
        let e = match pred.direct {
            Some(v) => corrnet::EssentialMatrix::from_vec(&v),
            None => corrnet::epipolar::weighted_eight_point(&rec.correspondences, &pred.weights),
        }
        .map(|e| corrnet::epipolar::rank2_project(&e));
        let mut row = vec![rec.id.to_string()];
        match e {
            Ok(e) => {
                row.push("0".into());
                let m = e.matrix();
                row.extend((0..3).flat_map(|i| (0..3).map(move |j| format!("{:?}", m[(i, j)]))));
            }
            Err(_) => {
                row.push("1".into());
                row.extend(std::iter::repeat_n(String::new(), 9));
            }
        }
        ess.write_record(&row)?;
    }
    weights.flush()?;
    ess.flush()?;
    println!("{} pairs\t{}", recs.len(), ctx.run_dir.display());
    Ok(())
}

fn print_summary(evals: &[MethodEvaluation]) {
    println!("method\tpairs\tfailures\tmap5\tmap10\tmap20");
    for e in evals {
        let v = &e.report.map_values;
        println!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
            e.method,
            e.report.n_pairs,
            e.failures(),
            v[0],
            v[1],
            v[2]
        );
    }
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let recs = ctx.load(&args.data, "test")?;
    let model = load_checkpoint(&args.checkpoint)?;
    let ec = ctx.eval_config();
    let evals = ctx
        .cfg
        .methods()?
        .into_iter()
        .map(|m| eval::evaluate_method(m, &recs, model.as_ref(), &ec))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    eval::write_per_pair_csv(&ctx.run_dir.join("per_pair.csv"), &evals)?;
    eval::write_summary_csv(&ctx.run_dir.join("summary.csv"), &evals)?;
    print_summary(&evals);
    Ok(())
}

pub fn bench(ctx: &Context, args: &BenchArgs) -> Result<()> {
    let recs = ctx.load(&args.data, "test")?;
    let model = load_checkpoint(&args.checkpoint)?;
    let rows = eval::benchmark_timing(
        &recs,
        &ctx.cfg.methods()?,
        model.as_ref(),
        ctx.cfg.eval.repetitions,
        ctx.cfg.eval.warmup,
        ctx.cfg.seed,
        &ctx.cfg.robust_config(),
    )?;
    let mut w = csv::Writer::from_path(ctx.run_dir.join("timing.csv"))?;
    w.write_record(["method", "median_ms", "p95_ms", "median_survivors", "samples"])?;
    println!("method\tmedian_ms\tp95_ms\tsurvivors\tsamples");
    for r in &rows {
        let rec = [
            r.method.to_string(),
            format!("{:.3}", r.median_ms),
            format!("{:.3}", r.p95_ms),
            format!("{:.1}", r.median_survivors),
            r.samples.to_string(),
        ];
        println!("{}", rec.join("\t"));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn classification_f1(model: &Model, recs: &[PairRecord], exec: Execution) -> f64 {
    let per = exec.map(recs.len(), |i| {
        let p = model.predict(Execution::Sequential, &recs[i].correspondences);
        p.weights.iter().map(|&w| w > 0.0).collect::<Vec<_>>()
    });
    let pred: Vec<bool> = per.into_iter().flatten().collect();
    let labels: Vec<bool> = recs.iter().flat_map(|r| r.labels().unwrap_or(&[]).iter().copied()).collect();
    eval::f1_score(&pred, &labels)
}

pub fn ablate(ctx: &Context, args: &AblateArgs) -> Result<()> {
    let data = ctx.data_root(&args.data)?;
    let tr = ctx.load(&Some(data.clone()), "train")?;
    let va = ctx.load(&Some(data.clone()), "val")?;
    let te = ctx.load(&Some(data), "test")?;
    let variants: Vec<Variant> = match &args.variants {
        Some(v) => v.iter().map(|s| s.parse().map_err(CliError::config)).collect::<Result<_>>()?,
        None => Variant::ALL.to_vec(),
    };
    let ec = ctx.eval_config();
    let ransac = eval::evaluate_method(Method::Ransac, &te, None, &ec)?;
    let mut w = csv::Writer::from_path(ctx.run_dir.join("ablation.csv"))?;
    w.write_record(["variant", "method", "test_f1", "map5", "map10", "map20", "failures"])?;
    let mut row = |variant: &str, f1: Option<f64>, e: &MethodEvaluation| -> Result<()> {
        let v = &e.report.map_values;
        let rec = [
            variant.to_string(),
            e.method.to_string(),
            f1.map(|f| format!("{f:.4}")).unwrap_or_default(),
            format!("{:.4}", v[0]),
            format!("{:.4}", v[1]),
            format!("{:.4}", v[2]),
            e.failures().to_string(),
        ];
        println!("{}", rec.join("\t"));
        w.write_record(&rec)?;
        Ok(())
    };
    println!("variant\tmethod\ttest_f1\tmap5\tmap10\tmap20\tfailures");
    row("-", None, &ransac)?;
    for variant in variants {
        let mut cfg = ctx.cfg.clone();
        cfg.set_variant(variant);
        let dir = ctx.run_dir.join(variant.name());
        let rep = training::train(ctx.exec, &tr, &va, &cfg.train_config()?, &dir)?;
        let model = rep.best_model;
        let f1 = (variant != Variant::Direct).then(|| classification_f1(&model, &te, ctx.exec));
        for m in [Method::Net8pt, Method::NetRansac] {
            row(variant.name(), f1, &eval::evaluate_method(m, &te, Some(&model), &ec)?)?;
        }
    }
    w.flush()?;
    Ok(())
}
