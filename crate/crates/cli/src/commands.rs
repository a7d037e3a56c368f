//! The pipeline stages. Each reads its upstream artifacts from the work directory, writes
//! its own and leaves a manifest behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use freqmark::attacks::{self, AttackDescriptor};
use freqmark::clustering::{cluster_map, ClusterConfig, ClusteringMap};
use freqmark::data::{gen_synthetic, load_cifar10, make_partition, DatasetBundle, LabeledSample, PartitionPlan, SyntheticConfig};
use freqmark::heatmap::{compute_heatmap, export_heatmap, load_heatmap, sensitivity_map, HeatmapConfig};
use freqmark::metrics::QualityReport;
use freqmark::nn::{self, Architecture, Classifier, Example, Shape, TrainConfig};
use freqmark::trigger::{assign_labels, gen_triggers, LabelStrategy, PerturbationKey, TriggerSet};
use freqmark::watermark::{self, EmbeddingJob, VerificationReport};

use crate::config::Config;
use crate::manifest::{artifact_files, check_fresh, sha256_file, RunManifest};

pub const M0: &str = "m0.ckpt";
pub const M1: &str = "m1.ckpt";
pub const HEATMAP: &str = "heatmap";
pub const MASK: &str = "mask";
pub const B1: &str = "triggers-b1";
pub const B2: &str = "triggers-b2";
pub const T2: &str = "triggers-t2";

/// How a command ended, for the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Done,
    Verified,
    NotVerified,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Done | Outcome::Verified => 0,
            Outcome::NotVerified => 2,
        }
    }
}

pub struct Ctx {
    pub dir: PathBuf,
    pub cfg: Config,
    pub threads: usize,
    pub export_key: bool,
}

struct Data {
    bundle: DatasetBundle,
    plan: PartitionPlan,
    files: Vec<PathBuf>,
}

fn examples(samples: &[LabeledSample]) -> Vec<Example<'_>> {
    samples.iter().map(|s| (&s.image, s.label)).collect()
}

fn pick<'a>(samples: &'a [LabeledSample], idx: &[usize]) -> Vec<&'a LabeledSample> {
    PartitionPlan::select(samples, idx)
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn manifest(&self, command: &str) -> RunManifest {
        RunManifest::new(command, &self.cfg, self.threads)
    }

    /// Checks freshness of an upstream artifact and records its files as inputs.
    fn consume(&self, m: &mut RunManifest, stem: &str) -> Result<Vec<PathBuf>> {
        let files = artifact_files(&self.dir, stem)?;
        if files.is_empty() {
            bail!("missing artifact {stem} in {} (run the upstream command first)", self.dir.display());
        }
        check_fresh(&self.dir, &files)?;
        for f in &files {
            m.record_input(&self.dir, f)?;
        }
        Ok(files)
    }

    fn consume_file(&self, m: &mut RunManifest, path: &Path) -> Result<()> {
        if !path.exists() {
            bail!("missing artifact {}", path.display());
        }
        check_fresh(&self.dir, &[path.to_path_buf()])?;
        m.record_input(&self.dir, path)
    }

    fn produce(&self, m: &mut RunManifest, stem: &str) -> Result<()> {
        for f in artifact_files(&self.dir, stem)? {
            m.record_output(&self.dir, &f)?;
        }
        Ok(())
    }

    fn finish(&self, mut m: RunManifest, started: Instant) -> Result<()> {
        m.timings.push(("total".into(), started.elapsed().as_secs_f64()));
        let path = m.save(&self.dir)?;
        println!("manifest: {}", path.display());
        Ok(())
    }

    fn data(&self) -> Result<Data> {
        let c = &self.cfg;
        let seed = c.get("data.seed")?;
        let (bundle, files) = match c.raw("data.source")? {
            "synthetic" => {
                let s = SyntheticConfig {
                    seed,
                    class_count: c.get("data.classes")?,
                    per_class: c.get("data.per_class")?,
                    height: c.get("data.height")?,
                    width: c.get("data.width")?,
                    channels: c.get("data.channels")?,
                };
                (gen_synthetic(&s)?, Vec::new())
            }
            "cifar10" => {
                let path = PathBuf::from(c.raw("data.path")?);
                if path.as_os_str().is_empty() {
                    bail!("data.source=cifar10 needs data.path");
                }
                let bundle = load_cifar10(&path, seed).with_context(|| format!("loading {}", path.display()))?;
                let files = if path.is_file() {
                    vec![path]
                } else {
                    let mut v: Vec<PathBuf> = fs::read_dir(&path)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                        .collect();
                    v.sort();
                    v
                };
                (bundle, files)
            }
            other => bail!("unknown data.source {other:?} (synthetic|cifar10)"),
        };
        let plan = make_partition(&bundle, c.get("trigger.q_t")?, c.get("trigger.partition_seed")?)?;
        Ok(Data { bundle, plan, files })
    }

    fn record_data(&self, m: &mut RunManifest, data: &Data) -> Result<()> {
        for f in &data.files {
            m.inputs.push(crate::manifest::FileRecord { path: f.to_string_lossy().into_owned(), sha256: sha256_file(f)? });
        }
        Ok(())
    }

    pub fn train_config(&self, epochs_key: &str) -> Result<TrainConfig> {
        let c = &self.cfg;
        let clip: f64 = c.get("train.clip")?;
        let cfg = TrainConfig {
            learning_rate: c.get("train.lr")?,
            momentum: c.get("train.momentum")?,
            batch_size: c.get("train.batch")?,
            epochs: c.get(epochs_key)?,
            seed: c.get("train.seed")?,
            clip_norm: (clip > 0.0).then_some(clip),
            augment: c.get("train.augment")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn key(&self) -> Result<PerturbationKey> {
        let c = &self.cfg;
        let mut key = PerturbationKey::new(c.get("trigger.key_seed")?, c.get("trigger.lambda_lo")?, c.get("trigger.lambda_hi")?)?;
        key.shared_channels = c.get("trigger.shared_channels")?;
        key.mirrored = c.get("trigger.mirrored")?;
        Ok(key)
    }

    pub fn strategy(&self) -> Result<LabelStrategy> {
        Ok(self.cfg.raw("trigger.strategy")?.parse()?)
    }

    fn architecture(&self, bundle: &DatasetBundle, classes: usize) -> Result<Architecture> {
        let (h, w, d) = bundle.image_dims().ok_or_else(|| anyhow!("dataset is empty"))?;
        Ok(Architecture::named(self.cfg.raw("nn.arch")?, Shape { channels: d, height: h, width: w }, classes)?)
    }
}

fn load_model(path: &Path) -> Result<Classifier> {
    Classifier::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_triggers(path: &Path) -> Result<TriggerSet> {
    TriggerSet::load(path).with_context(|| format!("loading triggers {}", path.display()))
}

fn short_hash(path: &Path) -> Result<String> {
    Ok(sha256_file(path)?[..16].to_string())
}

pub fn train_baseline(ctx: &Ctx) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("train-baseline");
    let data = ctx.data()?;
    ctx.record_data(&mut m, &data)?;
    let c = data.bundle.class_count;
    let model = Classifier::init(ctx.architecture(&data.bundle, c)?, c, ctx.cfg.get("nn.seed")?)?;
    let cfg = ctx.train_config("train.baseline_epochs")?;
    let (model, history) = nn::train(&model, &examples(&data.bundle.train), &examples(&data.bundle.val), &cfg)?;
    model.save(ctx.path(M0))?;
    if let Some(Some(acc)) = history.val_accuracy.last() {
        println!("m0: {} epochs, validation accuracy {acc:.4}", cfg.epochs);
    }
    ctx.produce(&mut m, M0)?;
    ctx.finish(m, started)?;
    Ok(Outcome::Done)
}

pub fn heatmap(ctx: &Ctx) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("heatmap");
    ctx.consume(&mut m, M0)?;
    let model = load_model(&ctx.path(M0))?;
    let data = ctx.data()?;
    ctx.record_data(&mut m, &data)?;
    let c = &ctx.cfg;
    let hcfg = HeatmapConfig {
        samples_per_freq: c.get("heatmap.samples_per_freq")?,
        lambda_range: (c.get("heatmap.lambda_lo")?, c.get("heatmap.lambda_hi")?),
        seed: c.get("heatmap.seed")?,
    };
    let hm = compute_heatmap(&model, &short_hash(&ctx.path(M0))?, &examples(&data.bundle.val), &hcfg)?;
    export_heatmap(&hm, ctx.path(HEATMAP))?;
    let rho: f64 = c.get("cluster.rho")?;
    let max = hm.t.iter().copied().fold(0.0, f64::max);
    println!("heat map: max error {max:.4}, {} positions at rho={rho}", sensitivity_map(&hm, rho)?.count());
    ctx.produce(&mut m, HEATMAP)?;
    ctx.finish(m, started)?;
    Ok(Outcome::Done)
}

pub fn cluster(ctx: &Ctx) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("cluster");
    ctx.consume(&mut m, HEATMAP)?;
    let hm = load_heatmap(ctx.path(HEATMAP))?;
    let c = &ctx.cfg;
    let smap = sensitivity_map(&hm, c.get("cluster.rho")?)?;
    let ccfg = ClusterConfig {
        seed: c.get("cluster.seed")?,
        max_iters: c.get("cluster.max_iters")?,
        tol: c.get("cluster.tol")?,
        selection: c.raw("cluster.selection")?.parse()?,
    };
    let mask = cluster_map(&hm, &smap, &ccfg)?;
    mask.save(ctx.path(MASK))?;
    println!("mask: {} of {} sensitive positions selected", mask.count(), smap.count());
    ctx.produce(&mut m, MASK)?;
    ctx.finish(m, started)?;
    Ok(Outcome::Done)
}

pub fn gen_trigger_sets(ctx: &Ctx) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("gen-triggers");
    ctx.consume(&mut m, MASK)?;
    let mask = ClusteringMap::load(ctx.path(MASK))?;
    let mask_id = short_hash(&ctx.path(MASK).with_extension("tensor"))?;
    let data = ctx.data()?;
    ctx.record_data(&mut m, &data)?;
    let key = ctx.key()?;
    let strategy = ctx.strategy()?;
    let (b, plan) = (&data.bundle, &data.plan);
    let a1 = pick(&b.train, &plan.a1);
    let source_labels: Vec<usize> = a1.iter().map(|s| s.label).collect();
    let make = |sources: &[&LabeledSample]| -> Result<TriggerSet> {
        let src: Vec<(u64, &freqmark::Image)> = sources.iter().map(|s| (s.id, &s.image)).collect();
        let set = gen_triggers(&src, &mask, &mask_id, &key)?;
        Ok(assign_labels(set, strategy, b.class_count, &source_labels)?)
    };
    let v = pick(&b.test, &plan.v);
    let t2 = make(&v)?;
    for (stem, set) in [(B1, make(&a1)?), (B2, make(&pick(&b.val, &plan.a2))?), (T2, t2.clone())] {
        set.save(ctx.path(stem))?;
        ctx.produce(&mut m, stem)?;
    }
    let pairs: Vec<(u64, &freqmark::Image, &freqmark::Image)> = v.iter().zip(&t2.samples).map(|(s, t)| (s.id, &s.image, t)).collect();
    let quality = QualityReport::compute(&pairs)?;
    fs::write(ctx.path("quality.csv"), quality.to_csv())?;
    m.record_output(&ctx.dir, &ctx.path("quality.csv"))?;
    println!(
        "triggers: {} per set, label {}, key {}, mean PSNR {:.2} dB, mean SSIM {:.4}",
        t2.len(),
        t2.label()?,
        key.fingerprint(),
        quality.mean_psnr_db,
        quality.mean_ssim
    );
    if ctx.export_key {
        fs::write(ctx.path("key.txt"), key.to_text())?;
        println!("key written to {}", ctx.path("key.txt").display());
    }
    ctx.finish(m, started)?;
    Ok(Outcome::Done)
}

pub fn embed(ctx: &Ctx) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("embed");
    ctx.consume(&mut m, B1)?;
    ctx.consume(&mut m, B2)?;
    let (b1, b2) = (load_triggers(&ctx.path(B1))?, load_triggers(&ctx.path(B2))?);
    let data = ctx.data()?;
    ctx.record_data(&mut m, &data)?;
    let classes = ctx.strategy()?.class_count(data.bundle.class_count);
    let job = EmbeddingJob {
        arch: ctx.architecture(&data.bundle, classes)?,
        class_count: classes,
        train: examples(&data.bundle.train),
        val: examples(&data.bundle.val),
        triggers_train: &b1,
        triggers_val: &b2,
        init_seed: ctx.cfg.get("nn.seed")?,
        train_config: ctx.train_config("train.marked_epochs")?,
    };
    let (model, history) = watermark::embed(&job)?;
    model.save(ctx.path(M1))?;
    if let Some(Some(acc)) = history.val_accuracy.last() {
        println!("m1: {} epochs, validation accuracy (with B2) {acc:.4}", job.train_config.epochs);
    }
    ctx.produce(&mut m, M1)?;
    ctx.finish(m, started)?;
    Ok(Outcome::Done)
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' }).collect()
}

fn write_report(ctx: &Ctx, m: &mut RunManifest, stem: &str, report: &VerificationReport) -> Result<()> {
    for (ext, body) in [("json", report.to_json()), ("csv", report.to_csv())] {
        let p = ctx.path(&format!("{stem}.{ext}"));
        fs::write(&p, body)?;
        m.record_output(&ctx.dir, &p)?;
    }
    Ok(())
}

fn print_verdict(what: &str, r: &VerificationReport) -> Outcome {
    println!(
        "{what}: trigger accuracy {:.4} (delta {}) -> {}",
        r.accuracy,
        r.delta,
        if r.verified { "verified" } else { "not verified" }
    );
    if r.verified {
        Outcome::Verified
    } else {
        Outcome::NotVerified
    }
}

fn model_and_triggers(ctx: &Ctx, m: &mut RunManifest, model: Option<&Path>, triggers: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
    let mp = model.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(M1));
    let tp = triggers.map(Path::to_path_buf).unwrap_or_else(|| ctx.path(T2));
    ctx.consume_file(m, &mp)?;
    for f in [tp.with_extension("tensor"), tp.with_extension("manifest")] {
        ctx.consume_file(m, &f)?;
    }
    Ok((mp, tp))
}

pub fn verify(ctx: &Ctx, model: Option<&Path>, triggers: Option<&Path>) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("verify");
    let (mp, tp) = model_and_triggers(ctx, &mut m, model, triggers)?;
    let report = watermark::verify(&load_model(&mp)?, &load_triggers(&tp)?, ctx.cfg.get("verify.delta")?, None)?;
    let stem = match mp.file_stem().and_then(|s| s.to_str()) {
        Some("m1") | None => "verify".to_string(),
        Some(s) => format!("verify-{s}"),
    };
    write_report(ctx, &mut m, &stem, &report)?;
    let outcome = print_verdict(&mp.display().to_string(), &report);
    ctx.finish(m, started)?;
    Ok(outcome)
}

/// Resolves `lowpass:B=mask` to the smallest bandwidth that keeps the whole mask.
pub fn parse_attack(spec: &str, mask: Option<&ClusteringMap>) -> Result<AttackDescriptor> {
    if spec.trim().replace(' ', "") == "lowpass:B=mask" {
        let mask = mask.ok_or_else(|| anyhow!("lowpass:B=mask needs a mask artifact"))?;
        let b = attacks::covering_bandwidth(&mask.canonical_positions(), mask.height, mask.width);
        return Ok(AttackDescriptor::Lowpass { bandwidth: b });
    }
    Ok(spec.parse()?)
}

/// Applies one attack. Model attacks return the attacked model; input attacks are carried
/// into verification.
fn run_attack(ctx: &Ctx, model: &Classifier, attack: &AttackDescriptor, clean: &[Example]) -> Result<Option<Classifier>> {
    Ok(match *attack {
        AttackDescriptor::Finetune { epochs, fraction, seed } => {
            let cfg = TrainConfig { seed, ..ctx.train_config("train.marked_epochs")? };
            Some(attacks::finetune(model, clean, fraction, epochs, &cfg)?)
        }
        AttackDescriptor::Prune { rate } => Some(attacks::prune_l1(model, rate)?),
        _ => None,
    })
}

fn clean_accuracy(model: &Classifier, clean: &[Example], attack: Option<&AttackDescriptor>) -> Result<f64> {
    match attack {
        None => Ok(nn::evaluate(model, clean)?),
        Some(a) => {
            let attacked: Vec<(freqmark::Image, usize)> =
                clean.iter().map(|(img, l)| Ok((a.apply_image(img)?, *l))).collect::<Result<_>>()?;
            let view: Vec<Example> = attacked.iter().map(|(i, l)| (i, *l)).collect();
            Ok(nn::evaluate(model, &view)?)
        }
    }
}

pub fn attack(ctx: &Ctx, spec: &str, model: Option<&Path>, triggers: Option<&Path>) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("attack");
    let (mp, tp) = model_and_triggers(ctx, &mut m, model, triggers)?;
    let mask = if artifact_files(&ctx.dir, MASK)?.is_empty() { None } else { Some(ClusteringMap::load(ctx.path(MASK))?) };
    let attack = parse_attack(spec, mask.as_ref())?;
    let marked = load_model(&mp)?;
    let data = ctx.data()?;
    ctx.record_data(&mut m, &data)?;
    let stem = format!("attack-{}", slug(&attack.to_string()));
    let clean: Vec<LabeledSample> = pick(&data.bundle.test, &data.plan.u).into_iter().cloned().collect();
    let delta = ctx.cfg.get("verify.delta")?;
    let (report, acc_o) = match run_attack(ctx, &marked, &attack, &examples(&data.bundle.val))? {
        Some(attacked) => {
            let path = ctx.path(&format!("m1-{}.ckpt", slug(&attack.to_string())));
            attacked.save(&path)?;
            m.record_output(&ctx.dir, &path)?;
            (watermark::verify(&attacked, &load_triggers(&tp)?, delta, None)?, nn::evaluate(&attacked, &examples(&clean))?)
        }
        None => {
            let r = watermark::verify(&marked, &load_triggers(&tp)?, delta, Some(&attack))?;
            (r, clean_accuracy(&marked, &examples(&clean), Some(&attack))?)
        }
    };
    write_report(ctx, &mut m, &stem, &report)?;
    println!("{attack}: clean accuracy {acc_o:.4}");
    let outcome = print_verdict(&attack.to_string(), &report);
    ctx.finish(m, started)?;
    Ok(outcome)
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub attack: String,
    pub acc_o: f64,
    pub acc_w: f64,
}

pub fn eval(ctx: &Ctx) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("eval");
    ctx.consume(&mut m, M0)?;
    ctx.consume(&mut m, M1)?;
    ctx.consume(&mut m, T2)?;
    ctx.consume(&mut m, MASK)?;
    let (m0, m1) = (load_model(&ctx.path(M0))?, load_model(&ctx.path(M1))?);
    let t2 = load_triggers(&ctx.path(T2))?;
    let mask = ClusteringMap::load(ctx.path(MASK))?;
    let data = ctx.data()?;
    ctx.record_data(&mut m, &data)?;
    let u_samples: Vec<LabeledSample> = pick(&data.bundle.test, &data.plan.u).into_iter().cloned().collect();
    let u = examples(&u_samples);
    let val = examples(&data.bundle.val);
    let mut rows = vec![
        EvalRow { model: "m0".into(), attack: "none".into(), acc_o: nn::evaluate(&m0, &u)?, acc_w: watermark::trigger_accuracy(&m0, &t2)? },
        EvalRow { model: "m1".into(), attack: "none".into(), acc_o: nn::evaluate(&m1, &u)?, acc_w: watermark::trigger_accuracy(&m1, &t2)? },
    ];
    let specs = ctx.cfg.raw("eval.attacks")?.to_string();
    for spec in specs.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let attack = parse_attack(spec, Some(&mask))?;
        let (acc_o, acc_w) = match run_attack(ctx, &m1, &attack, &val)? {
            Some(attacked) => (nn::evaluate(&attacked, &u)?, watermark::trigger_accuracy(&attacked, &t2)?),
            None => {
                let r = watermark::verify(&m1, &t2, ctx.cfg.get("verify.delta")?, Some(&attack))?;
                (clean_accuracy(&m1, &u, Some(&attack))?, r.accuracy)
            }
        };
        rows.push(EvalRow { model: "m1".into(), attack: attack.to_string(), acc_o, acc_w });
    }
    let mut csv = String::from("model,attack,acc_o,acc_w\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:.6},{:.6}", r.model, r.attack, r.acc_o, r.acc_w);
        println!("{:<4} {:<44} acc_o {:.4}  acc_w {:.4}", r.model, r.attack, r.acc_o, r.acc_w);
    }
    println!("fidelity gap |acc_o(m0) - acc_o(m1)| = {:.4}", (rows[0].acc_o - rows[1].acc_o).abs());
    fs::write(ctx.path("eval.csv"), csv)?;
    m.record_output(&ctx.dir, &ctx.path("eval.csv"))?;
    ctx.finish(m, started)?;
    Ok(Outcome::Done)
}

pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() < 4 {
                bail!("bad eval row {l:?}");
            }
            // attack names may contain commas
            let n = f.len();
            Ok(EvalRow { model: f[0].into(), attack: f[1..n - 2].join(","), acc_o: f[n - 2].parse()?, acc_w: f[n - 1].parse()? })
        })
        .collect()
}

pub fn pipeline(ctx: &Ctx) -> Result<Outcome> {
    let started = Instant::now();
    let mut m = ctx.manifest("pipeline");
    let stages: [(&str, fn(&Ctx) -> Result<Outcome>); 6] = [
        ("train-baseline", train_baseline),
        ("heatmap", heatmap),
        ("cluster", cluster),
        ("gen-triggers", gen_trigger_sets),
        ("embed", embed),
        ("eval", eval),
    ];
    for (name, stage) in stages {
        let t = Instant::now();
        println!("== {name}");
        stage(ctx).with_context(|| format!("stage {name}"))?;
        m.timings.push((name.into(), t.elapsed().as_secs_f64()));
    }
    println!("== verify");
    let outcome = verify(ctx, None, None)?;
    ctx.finish(m, started)?;
    Ok(outcome)
}
