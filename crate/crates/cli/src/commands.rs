use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context as _, Result};
use np_robust::analysis::{fc_bound_check, gaussian_linear_data, np_bound_check, BoundReport};
use np_robust::attack::{evaluate_under_attack, pgd_attack, AttackConfig, AttackRow};
use np_robust::bottleneck::compress_representatives;
use np_robust::checkpoint::{Checkpoint, ModelTag};
use np_robust::config::KeyValues;
use np_robust::data::{load_idx, subset, synth_manifold, write_idx, Dataset, SynthKind};
use np_robust::graph::fuzzy_graph;
use np_robust::network::{Bottleneck, BottleneckKind, NetworkSpec};
use np_robust::tensor::Tensor;
use np_robust::trainer::{embed_graph, history_csv, train_adversarial, train_fc, train_np, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::manifest::RunManifest;
use crate::{
    usage, AnalyzeArgs, AttackArgs, Cli, CompressArgs, EvalArgs, InitEmbedArgs, InvariantTripped, SynthArgs,
    TrainArgs, TrainFlags,
};

const DESK_TRAIN: usize = 10_000;
const DESK_TEST: usize = 2_000;

pub struct Context<'a> {
    pub cli: &'a Cli,
    pub started: Instant,
}

impl Context<'_> {
    /// `--seed`, else the config file's seed, else 0.
    fn seed(&self) -> u64 {
        self.cli
            .seed
            .or_else(|| self.config_file().ok()?.parsed("seed").ok()?)
            .unwrap_or(0)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cli.out_dir.join(name)
    }

    fn finish(&self, m: &RunManifest) -> Result<()> {
        let path = m.write(&self.cli.out_dir, self.started.elapsed())?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }

    /// Applies `--subset`, `--full` or the desk-scale cut.
    fn cut(&self, ds: Dataset, desk: usize) -> Result<Dataset> {
        let n = match (self.cli.full, self.cli.subset) {
            (true, _) => return Ok(ds),
            (false, Some(n)) if n > ds.len() => {
                return Err(usage(format!("--subset {n} exceeds the {} available samples", ds.len())))
            }
            (false, Some(n)) => n,
            (false, None) if ds.len() > desk => desk,
            (false, None) => return Ok(ds),
        };
        Ok(subset(&ds, n, self.seed())?)
    }

    fn config_file(&self) -> Result<KeyValues> {
        match &self.cli.config {
            Some(p) => KeyValues::read(p).map_err(|e| usage(e.to_string())),
            None => Ok(KeyValues::new()),
        }
    }

    /// Defaults, then the config file, then flags.
    fn train_config(&self, f: &TrainFlags) -> Result<TrainConfig> {
        let mut kv = self.config_file()?;
        macro_rules! flag {
            ($field:ident) => {
                if let Some(v) = &f.$field {
                    kv.set(stringify!($field), v);
                }
            };
        }
        flag!(alpha);
        flag!(lr);
        flag!(epochs);
        flag!(batch);
        flag!(graph_refresh_epochs);
        flag!(neg_samples);
        flag!(optimizer);
        flag!(k);
        flag!(init_epochs);
        flag!(init_lr);
        flag!(encoder_warmup_epochs);
        flag!(adv_eps);
        flag!(adv_alpha);
        flag!(adv_random_start);
        if let Some(s) = f.steps {
            kv.set("adv_steps", s);
        }
        if let Some(s) = self.cli.seed {
            kv.set("seed", s);
        }
        let adversarial = !matches!(kv.get("adv_eps"), None | Some("none"));
        if !adversarial {
            for key in ["adv_steps", "adv_alpha", "adv_random_start"] {
                if kv.get(key).is_some() {
                    return Err(usage(format!("{key} given without adv_eps")));
                }
            }
        }
        let cfg = TrainConfig::from_kv(&kv).map_err(|e| usage(e.to_string()))?;
        if let Some(a) = &cfg.adversarial {
            if a.epsilon > 0.0 && a.iters == 0 {
                return Err(usage(format!("--adv-eps {} conflicts with --steps 0", a.epsilon)));
            }
        }
        Ok(cfg)
    }
}

fn find(dir: &Path, base: &str) -> Result<PathBuf> {
    let plain = dir.join(base);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{base}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    bail!("neither {} nor its .gz exists", plain.display())
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let images = find(dir, &format!("{split}-images-idx3-ubyte"))?;
    let labels = find(dir, &format!("{split}-labels-idx1-ubyte"))?;
    Ok(load_idx(&images, &labels)?)
}

fn spec_for(ds: &Dataset, kind: BottleneckKind) -> NetworkSpec {
    if ds.images.shape()[1..] == [1, 28, 28] {
        NetworkSpec::mnist(kind)
    } else {
        NetworkSpec::vector(ds.features(), ds.classes, kind)
    }
}

fn load_checkpoint(stem: &Path) -> Result<Checkpoint> {
    Checkpoint::load(stem).with_context(|| format!("loading checkpoint {}", stem.display()))
}

fn stem_name(stem: &Path) -> String {
    stem.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn check_input(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ds.images.shape()[1..] != ck.network.spec.input {
        bail!(
            "checkpoint expects inputs {:?}, dataset has {:?}",
            ck.network.spec.input,
            &ds.images.shape()[1..]
        );
    }
    Ok(())
}

fn model_label(ck: &Checkpoint) -> String {
    format!("{}{}", ck.tag, ck.network.spec.bottleneck.dim())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let cfg = ctx.train_config(&a.settings)?;
    if a.dim == 0 {
        return Err(usage("--dim must be positive"));
    }
    let ds = ctx.cut(load_split(&a.data.data, "train")?, DESK_TRAIN)?;
    let np = a.bottleneck == "np";
    let kind = if np {
        BottleneckKind::NeighborPreserving(a.dim)
    } else {
        BottleneckKind::FullyConnected(a.dim)
    };
    let spec = spec_for(&ds, kind);
    let state = if cfg.adversarial.is_some() {
        train_adversarial(&ds, &spec, &cfg)?
    } else if np {
        train_np(&ds, &spec, &cfg)?
    } else {
        train_fc(&ds, &spec, &cfg)?
    };

    let name = a.name.clone().unwrap_or_else(|| format!("{}{}", a.bottleneck, a.dim));
    let stem = ctx.out(&name);
    let mut ck = Checkpoint::new(state.network);
    if np {
        ck.table_labels = Some(ds.labels.clone());
    }
    ck.save(&stem)?;
    let loss = ctx.out(&format!("{name}-loss.csv"));
    write(&loss, &history_csv(&state.history))?;

    let mut m = RunManifest::new("train", cfg.seed);
    m.config = cfg.to_kv();
    m.config.set("bottleneck", kind);
    m.config.set("data", a.data.data.display());
    m.config.set("samples", ds.len());
    m.datasets.push(("train".into(), ds.fingerprint()));
    m.checkpoints.push(stem);
    m.outputs.push(loss);
    if let Some(g) = &state.graph {
        let edges = ctx.out(&format!("{name}-graph.edges"));
        g.write(&edges)?;
        m.outputs.push(edges);
    }
    ctx.finish(&m)?;

    let h = &state.history;
    if let Some(last) = h.last() {
        eprintln!("{} epochs, final L_full {:.6}", h.len(), last.l_full);
    }
    if h.len() >= 5 && h[4].l_full >= h[0].l_full {
        return Err(InvariantTripped(format!(
            "L_full did not fall over the first five epochs ({:.6} -> {:.6})",
            h[0].l_full, h[4].l_full
        ))
        .into());
    }
    Ok(())
}

fn attack_config(eps: f64, steps: Option<usize>, alpha: Option<f64>, random_start: bool) -> Result<AttackConfig> {
    let mut c = AttackConfig::eval(eps);
    if eps > 0.0 {
        if let Some(s) = steps {
            c.iters = s;
        }
    }
    if let Some(al) = alpha {
        c.step = al;
    }
    c.random_start = random_start && eps > 0.0;
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    if a.eps.is_empty() {
        return Err(usage("--eps needs at least one value"));
    }
    let configs = a
        .eps
        .iter()
        .map(|&e| attack_config(e, a.steps, None, false))
        .collect::<Result<Vec<_>>>()?;
    let ck = load_checkpoint(&a.model)?;
    let test = ctx.cut(load_split(&a.data.data, "t10k")?, DESK_TEST)?;
    check_input(&ck, &test)?;
    let label = model_label(&ck);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
    let mut csv = format!("{}\n", AttackRow::HEADER);
    for c in &configs {
        let acc = evaluate_under_attack(&ck.network, &test.images, &test.labels, c, a.batch, &mut rng)?;
        let row = AttackRow {
            eps: c.epsilon,
            model: label.clone(),
            accuracy: acc,
            n: test.len(),
        };
        println!("{}", row.to_csv());
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    let out = ctx.out(&format!("{}-eval.csv", stem_name(&a.model)));
    write(&out, &csv)?;

    let mut m = RunManifest::new("eval", ctx.seed());
    m.config.set("model", a.model.display());
    m.config.set("eps", a.eps.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    m.config.set("steps", configs.iter().map(|c| c.iters.to_string()).collect::<Vec<_>>().join(","));
    m.config.set("batch", a.batch);
    m.config.set("data", a.data.data.display());
    m.config.set("samples", test.len());
    m.datasets.push(("test".into(), test.fingerprint()));
    m.checkpoints.push(a.model.clone());
    m.outputs.push(out);
    ctx.finish(&m)
}

pub fn attack(ctx: &Context, a: &AttackArgs) -> Result<()> {
    let cfg = attack_config(a.eps, a.steps, a.alpha, a.random_start)?;
    if a.batch == 0 {
        return Err(usage("--batch must be positive"));
    }
    let ck = load_checkpoint(&a.model)?;
    let test = ctx.cut(load_split(&a.data.data, "t10k")?, DESK_TEST)?;
    check_input(&ck, &test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed());
    let mut adv = Vec::with_capacity(test.images.len());
    for start in (0..test.len()).step_by(a.batch) {
        let ids: Vec<usize> = (start..(start + a.batch).min(test.len())).collect();
        let xb = test.images.select_rows(&ids)?;
        let out = pgd_attack(&ck.network, &xb, &test.labels[ids[0]..=ids[ids.len() - 1]], &cfg, &mut rng)?;
        adv.extend_from_slice(out.data());
    }
    let adv = Tensor::new(test.images.shape().to_vec(), adv)?;
    let acc = ck.network.accuracy(&adv, &test.labels)?;
    let row = AttackRow {
        eps: cfg.epsilon,
        model: model_label(&ck),
        accuracy: acc,
        n: test.len(),
    };
    println!("{}", row.to_csv());

    let name = format!("{}-adv-eps{}", stem_name(&a.model), cfg.epsilon);
    let images = ctx.out(&format!("{name}-images-idx3-ubyte"));
    let labels = ctx.out(&format!("{name}-labels-idx1-ubyte"));
    write_idx(&Dataset::new(adv, test.labels.clone(), &name)?, &images, &labels)?;
    let csv = ctx.out(&format!("{name}.csv"));
    write(&csv, &format!("{}\n{}\n", AttackRow::HEADER, row.to_csv()))?;

    let mut m = RunManifest::new("attack", ctx.seed());
    m.config.set("model", a.model.display());
    m.config.set("eps", cfg.epsilon);
    m.config.set("steps", cfg.iters);
    m.config.set("alpha", cfg.step);
    m.config.set("random_start", cfg.random_start);
    m.config.set("batch", a.batch);
    m.config.set("data", a.data.data.display());
    m.config.set("samples", test.len());
    m.datasets.push(("test".into(), test.fingerprint()));
    m.checkpoints.push(a.model.clone());
    m.outputs.extend([images, labels, csv]);
    ctx.finish(&m)
}

pub fn compress(ctx: &Context, a: &CompressArgs) -> Result<()> {
    if a.clusters_per_class == 0 {
        return Err(usage("--clusters-per-class must be positive"));
    }
    let ck = load_checkpoint(&a.model)?;
    let table = ck
        .network
        .table()
        .ok_or_else(|| anyhow!("{} is an FC checkpoint; compression needs a reference table", a.model.display()))?;
    let labels = ck
        .table_labels
        .as_ref()
        .ok_or_else(|| anyhow!("{} has no class labels for its table rows", a.model.display()))?;
    let (small, small_labels) = compress_representatives(table, labels, a.clusters_per_class, ctx.seed())?;
    let before = table.len();
    let mut net = ck.network.clone();
    net.bottleneck = Bottleneck::Np(small);
    let out = Checkpoint {
        tag: ModelTag::Ref,
        network: net,
        table_labels: Some(small_labels),
    };
    let name = a.name.clone().unwrap_or_else(|| format!("{}-ref", stem_name(&a.model)));
    let stem = ctx.out(&name);
    out.save(&stem)?;
    eprintln!("{before} references -> {}", out.network.table().map_or(0, |t| t.len()));

    let mut m = RunManifest::new("compress", ctx.seed());
    m.config.set("model", a.model.display());
    m.config.set("clusters_per_class", a.clusters_per_class);
    m.checkpoints.push(a.model.clone());
    m.checkpoints.push(stem);
    ctx.finish(&m)
}

pub fn analyze(ctx: &Context, a: &AnalyzeArgs) -> Result<()> {
    if a.model.is_none() && a.synthetic_fc.is_none() {
        return Err(usage("analyze needs --model, --synthetic-fc, or both"));
    }
    if a.points == 0 {
        return Err(usage("--points must be positive"));
    }
    let seed = ctx.seed();
    let mut m = RunManifest::new("analyze", seed);
    m.config.set("points", a.points);
    m.config.set("dirs", a.dirs);
    m.config.set("h", a.h);
    let mut summary = String::new();
    let mut violations = 0;

    let mut np_report: Option<BoundReport> = None;
    if let Some(model) = &a.model {
        let ck = load_checkpoint(model)?;
        let table = ck
            .network
            .table()
            .ok_or_else(|| anyhow!("{} has no reference table to check", model.display()))?;
        let test = ctx.cut(load_split(&a.data.data, "t10k")?, DESK_TEST)?;
        check_input(&ck, &test)?;
        let pick = if a.points >= test.len() { test } else { subset(&test, a.points, seed)? };
        let u = ck.network.encode(&pick.images)?;
        let r = np_bound_check(table, &u, a.h, a.dirs, seed)?;
        let csv = ctx.out("analyze-np.csv");
        write(&csv, &r.to_csv())?;
        summary.push_str(&r.summary());
        violations += r.violations;
        m.config.set("model", model.display());
        m.config.set("data", a.data.data.display());
        m.datasets.push(("test".into(), pick.fingerprint()));
        m.checkpoints.push(model.clone());
        m.outputs.push(csv);
        np_report = Some(r);
    }

    let mut t2 = Vec::new();
    if let Some(trials) = a.synthetic_fc {
        if trials == 0 {
            return Err(usage("--synthetic-fc must be positive"));
        }
        let mut rows = String::from("seed,T2,violations\n");
        let mut held = 0;
        for s in 0..trials {
            let (x, y) = gaussian_linear_data(a.fc_n, a.fc_p, a.fc_d, seed + s)?;
            let r = fc_bound_check(&x, &y)?;
            if s == 0 {
                let csv = ctx.out("analyze-fc.csv");
                write(&csv, &r.to_csv())?;
                summary.push_str(&r.summary());
                m.outputs.push(csv);
            }
            let _ = writeln!(rows, "{},{},{}", seed + s, r.t2.unwrap_or(f64::NAN), r.violations);
            held += usize::from(r.violations == 0);
            violations += r.violations;
            t2.extend(r.t2);
        }
        let csv = ctx.out("analyze-fc-trials.csv");
        write(&csv, &rows)?;
        m.outputs.push(csv);
        let _ = writeln!(summary, "FC trials holding the bound: {held}/{trials}");
        m.config.set("synthetic_fc", trials);
        m.config.set("fc_n", a.fc_n);
        m.config.set("fc_p", a.fc_p);
        m.config.set("fc_d", a.fc_d);
    }

    if let (Some(t1), false) = (np_report.as_ref().and_then(|r| r.t1), t2.is_empty()) {
        let mean_t2 = t2.iter().sum::<f64>() / t2.len() as f64;
        let _ = writeln!(summary, "T1 / T2 = {:.6e} (T2 averaged over {} trials)", t1 / mean_t2, t2.len());
    }
    print!("{summary}");
    let text = ctx.out("analyze-summary.txt");
    write(&text, &summary)?;
    m.outputs.push(text);
    ctx.finish(&m)?;
    if violations > 0 {
        return Err(InvariantTripped(format!("{violations} bound violations")).into());
    }
    Ok(())
}

pub fn init_embed(ctx: &Context, a: &InitEmbedArgs) -> Result<()> {
    let cfg = ctx.train_config(&a.settings)?;
    if a.dim == 0 {
        return Err(usage("--dim must be positive"));
    }
    let ds = ctx.cut(load_split(&a.data.data, "train")?, DESK_TRAIN)?;
    if ds.len() < 2 {
        bail!("need at least two samples");
    }
    let u = match &a.model {
        Some(model) => {
            let ck = load_checkpoint(model)?;
            check_input(&ck, &ds)?;
            ck.network.encode(&ds.images)?
        }
        None => ds.flat(),
    };
    let graph = fuzzy_graph(&u, cfg.k.min(ds.len() - 1))?;
    let y = embed_graph(&graph, a.dim, &cfg)?;
    let mut csv = String::from("index,label");
    for j in 0..a.dim {
        let _ = write!(csv, ",y{j}");
    }
    csv.push('\n');
    for (i, label) in ds.labels.iter().enumerate() {
        let _ = write!(csv, "{i},{label}");
        for v in y.row(i) {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    let out = ctx.out("init-embed.csv");
    write(&out, &csv)?;
    let edges = ctx.out("init-embed.edges");
    graph.write(&edges)?;

    let mut m = RunManifest::new("init-embed", cfg.seed);
    m.config = cfg.to_kv();
    m.config.set("dim", a.dim);
    m.config.set("data", a.data.data.display());
    m.config.set("samples", ds.len());
    if let Some(model) = &a.model {
        m.checkpoints.push(model.clone());
    }
    m.datasets.push(("train".into(), ds.fingerprint()));
    m.outputs.extend([out, edges]);
    ctx.finish(&m)
}

pub fn synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    let kind: SynthKind = a.kind.parse().map_err(|e: np_robust::Error| usage(e.to_string()))?;
    if a.n == 0 || a.test_n == 0 {
        return Err(usage("--n and --test-n must be positive"));
    }
    // One draw split in two, so both splits share blob centers.
    let all = synth_manifold(kind, a.n + a.test_n, a.noise, ctx.seed())?;
    let mut ids: Vec<usize> = (0..all.len()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed() ^ 0x5a11));
    let (test_ids, train_ids) = ids.split_at_mut(a.test_n);
    train_ids.sort_unstable();
    test_ids.sort_unstable();

    let mut m = RunManifest::new("synth", ctx.seed());
    m.config.set("kind", kind);
    m.config.set("n", a.n);
    m.config.set("test_n", a.test_n);
    m.config.set("noise", a.noise);
    for (split, part) in [("train", &*train_ids), ("t10k", &*test_ids)] {
        let ds = all.select(part)?;
        let images = ctx.out(&format!("{split}-images-idx3-ubyte"));
        let labels = ctx.out(&format!("{split}-labels-idx1-ubyte"));
        write_idx(&ds, &images, &labels)?;
        m.datasets.push((split.into(), ds.fingerprint()));
        m.outputs.extend([images, labels]);
    }
    ctx.finish(&m)
}
