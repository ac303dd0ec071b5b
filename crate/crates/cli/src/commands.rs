use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use cameo_core::container::save_tensor;
use cameo_core::curation_match::{curate, read_clip_manifest, synthetic_corpus, CurationConfig};
use cameo_core::dual_tower::load_checkpoint;
use cameo_core::identity_binding::{assign_positions, SceneLayout};
use cameo_core::latents::{ReferencePayload, ReferenceSignal};
use cameo_core::synthetic_world::{
    build_dataset, make_scene, read_dataset, write_dataset, PoseMode, SceneKind, SpecOptions, Split, World,
};
use cameo_core::trainer::eval::Metrics;
use cameo_core::trainer::{
    checkpoint_extra, evaluate, experiment_from_meta, run_variant, sample_scene, train_stage, AblationFlags,
    EvalReport, EvalSplit, Experiment, ExperimentConfig, PipelineIo, Stage, TrainState, Variant,
};
use serde_json::json;

use crate::settings::{apply_disable, experiment, seed_override};
use crate::{
    AblateArgs, Ablation, Cli, Command, CurateArgs, EvalArgs, GenDataArgs, InspectArgs, SampleArgs, SplitArg, TrainArgs,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Ablate(a) => ablate(cli, a),
        Command::Curate(a) => curate_cmd(a),
        Command::InspectPositions(a) => inspect(cli, a),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let cfg = experiment(cli.config.as_deref(), cli.seed)?;
    let world = World::new(cfg.world.clone(), cfg.seed)?;
    let scenes = build_dataset(&world, a.scenes, a.mix, cfg.seed)?;
    write_dataset(&a.out, &scenes)?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    println!(
        "wrote {} scenes to {} (seed {})",
        scenes.len(),
        a.out.display(),
        cfg.seed
    );
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let stage = a.stage;
    let mut cfg = experiment(cli.config.as_deref(), cli.seed)?;
    if let Some(s) = a.steps {
        match stage {
            Stage::Stage1Audio => cfg.train.stage1_audio_steps = s,
            Stage::Stage1Video => cfg.train.stage1_video_steps = s,
            Stage::Stage2Joint => cfg.train.stage2_steps = s,
            Stage::Stage3Multiview => cfg.train.stage3_steps = s,
        }
    }
    if let Some(lr) = a.lr {
        if stage == Stage::Stage3Multiview {
            cfg.train.stage3_lr = lr;
        } else {
            cfg.train.lr = lr;
        }
    }
    if let Some(b) = a.batch {
        cfg.train.batch = b;
    }
    apply_disable(&mut cfg.ablation, &a.disable);
    cfg.validate()?;
    let flags = cfg.ablation;
    let exp = Experiment::new(cfg.clone())?;

    let mut state = if let Some(p) = &a.resume {
        let (st, _) = TrainState::load(p, &exp.model).with_context(|| format!("resuming from {}", p.display()))?;
        if st.stage != stage {
            bail!("{} holds {}, not {}", p.display(), st.stage.name(), stage.name());
        }
        st
    } else if let Some(p) = &a.init {
        let (st, _) = TrainState::load(p, &exp.model).with_context(|| format!("initializing from {}", p.display()))?;
        if !stage.accepts_init_from(st.stage) {
            bail!("{} cannot start from a {} checkpoint", stage.name(), st.stage.name());
        }
        TrainState::continue_from(&st, stage)
    } else {
        TrainState::fresh(&exp.model, stage)?
    };

    let opts = exp.stage_options(stage, flags);
    let data = match &a.data {
        Some(dir) => {
            let raw: Vec<_> = read_dataset(dir)?
                .into_iter()
                .filter(|s| s.kind == stage.scene_kind())
                .collect();
            if raw.is_empty() {
                bail!(
                    "{} has no {} scenes for {}",
                    dir.display(),
                    stage.scene_kind().name(),
                    stage.name()
                );
            }
            exp.prepare_all(&raw, &opts)?
        }
        None => exp.training_set(stage, flags)?,
    };
    let run = exp.stage_run(stage, flags);
    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join(format!("{}.jsonl", stage.name()));
    let log = File::options()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(&log_path)?;
    let mut log = BufWriter::new(log);
    let recs = train_stage(&exp.model, &mut state, &data, &run, cfg.train.log_every, Some(&mut log))?;
    log.flush()?;
    let ckpt = a.out.join(format!("{}.ckpt", stage.name()));
    state.save(&ckpt, &exp.model, cfg.seed, checkpoint_extra(&cfg, &run))?;
    for r in &recs {
        println!(
            "{} step {:>5} loss {:.4} video {} audio {} |g| {:.3}",
            r.stage,
            r.step,
            r.loss,
            fmt_opt(r.loss_v),
            fmt_opt(r.loss_a),
            r.grad_norm
        );
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Experiment stored in a checkpoint plus its parameters.
fn load_model(path: &Path) -> Result<(Experiment, TrainState, AblationFlags)> {
    let ck = load_checkpoint::<f32>(path).with_context(|| format!("reading {}", path.display()))?;
    let (cfg, flags) = experiment_from_meta(&ck.meta)?;
    let exp = Experiment::new(cfg)?;
    let (st, _) = TrainState::load(path, &exp.model)?;
    Ok((exp, st, flags))
}

fn eval_split(s: SplitArg, views: Option<usize>, exp: &Experiment) -> EvalSplit {
    match s {
        SplitArg::Standard => EvalSplit::Standard,
        SplitArg::LargePose => EvalSplit::LargePose {
            views: views.unwrap_or(exp.cfg.world.views),
        },
    }
}

fn split_name(s: EvalSplit) -> String {
    match s {
        EvalSplit::Standard => "standard".into(),
        EvalSplit::LargePose { views } => format!("large_pose_{views}v"),
    }
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let (exp, st, flags) = load_model(&a.checkpoint)?;
    let seed = seed_override(cli.seed)?.unwrap_or(exp.cfg.seed);
    let split = eval_split(a.split, a.views, &exp);
    let raw = exp.eval_scene(split, a.scene)?;
    let sc = exp
        .prep
        .prepare(&exp.world, &raw, &Experiment::eval_options(split, flags))?;
    let mut sampler = exp.sampler();
    if let Some(n) = a.steps {
        sampler.steps = n;
    }
    let out = sample_scene(
        &exp.model,
        &st.params,
        &sc,
        &exp.forward_options(flags),
        &sampler,
        seed,
        a.scene as u64,
    )?;
    let frames = exp.prep.decode_video(&exp.world, out.video.as_ref().expect("video"))?;
    let wave = exp.prep.decode_audio(&exp.world, out.audio.as_ref().expect("audio"))?;
    let report = exp.world.decode_binding(&frames, &wave, &sc.spec);
    fs::create_dir_all(&a.out)?;
    save_tensor(&a.out.join("frames.iapl"), &frames)?;
    save_tensor(&a.out.join("wave.iapl"), &wave)?;
    let summary = json!({
        "scene_id": sc.id,
        "split": split_name(split),
        "seed": seed,
        "sampler_steps": sampler.steps,
        "checkpoint_stage": st.stage.name(),
        "spec": sc.spec,
        "binding": report,
    });
    fs::write(
        a.out.join("sample.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "{:<6} {:>8} {:>10} {:>10} {:>8}",
        "slot", "intended", "appearance", "timbre", "mouth"
    );
    for s in &report.slots {
        println!(
            "{:<6} {:>8} {:>10} {:>10} {:>8.3}",
            s.slot,
            s.intended,
            s.appearance,
            s.timbre.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
            s.mouth_agreement
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn metric_rows(report: &EvalReport, base: serde_json::Value) -> Vec<serde_json::Value> {
    let row = |group: &str, m: &Metrics| {
        let mut v = base.clone();
        let o = v.as_object_mut().expect("object");
        o.insert("group".into(), json!(group));
        o.insert("scenes".into(), json!(m.scenes));
        o.insert("slots".into(), json!(m.slots));
        o.insert("scored".into(), json!(m.scored));
        o.insert("appearance".into(), json!(m.appearance_accuracy()));
        o.insert("timbre".into(), json!(m.timbre_accuracy()));
        o.insert("joint".into(), json!(m.joint_accuracy()));
        o.insert("alignment".into(), json!(m.alignment()));
        o.insert("recon".into(), json!(m.recon_error()));
        o.insert("eval_loss".into(), json!(report.eval_loss));
        v
    };
    vec![
        row("single", &report.single),
        row("multi", &report.multi),
        row("all", &report.all()),
    ]
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let (mut exp, st, flags) = load_model(&a.checkpoint)?;
    let seed = seed_override(cli.seed)?.unwrap_or(exp.cfg.seed);
    if let Some(n) = a.scenes {
        exp.cfg.eval.scenes = n;
    }
    if let Some(n) = a.steps {
        exp.cfg.eval.sampler_steps = n;
    }
    let split = eval_split(a.split, a.views, &exp);
    let scenes = exp.eval_set(split, flags)?;
    let report = evaluate(
        &exp.world,
        &exp.prep,
        &st.params,
        &scenes,
        &exp.forward_options(flags),
        &exp.sampler(),
        seed,
    )?;
    let title = format!("{} on {}", st.stage.name(), split_name(split));
    print!("{}", report.table(&title));
    if let Some(out) = &a.out {
        let base = json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "stage": st.stage.name(),
            "split": split_name(split),
            "seed": seed,
        });
        write_jsonl(out, &metric_rows(&report, base))?;
    }
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let base = experiment(cli.config.as_deref(), cli.seed)?;
    let mut variants = vec![Variant::Full];
    if a.disable.is_empty() {
        variants.extend([
            Variant::NoIdentityEmbeddings,
            Variant::NoSubjectAnchors,
            Variant::OneStage,
        ]);
    }
    for d in &a.disable {
        let v = match d {
            Ablation::IdentityEmbeddings => Variant::NoIdentityEmbeddings,
            Ablation::SubjectAnchors => Variant::NoSubjectAnchors,
            Ablation::Staging => Variant::OneStage,
        };
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let mut rows = vec![];
    let mut summary = vec![];
    for seed in base.seed..base.seed + a.seeds {
        for &v in &variants {
            let cfg = ExperimentConfig { seed, ..base.clone() };
            let dir = a.out.join(v.name()).join(format!("seed{seed}"));
            fs::create_dir_all(&dir)?;
            let mut log = BufWriter::new(File::create(dir.join("run.jsonl"))?);
            let mut io = PipelineIo {
                checkpoint_dir: Some(&dir),
                log: Some(&mut log),
            };
            eprintln!("training {} seed {seed}", v.name());
            let (_, res) = run_variant(&cfg, v, &mut io)?;
            log.flush()?;
            let mut models = vec![("stage2", &res.stage2)];
            if let Some(r) = &res.stage3 {
                models.push(("stage3", r));
            }
            if let Some(r) = &res.large_pose_one_shot {
                models.push(("large_pose_one_shot", r));
            }
            if let Some(r) = &res.large_pose_multiview {
                models.push(("large_pose_multiview", r));
            }
            for (model, rep) in models {
                rows.extend(metric_rows(
                    rep,
                    json!({ "tag": v.name(), "seed": seed, "model": model, "flags": res.flags }),
                ));
            }
            let fin = res.final_report();
            summary.push((
                v,
                seed,
                res.stage2.eval_loss,
                res.stage2.all().joint_accuracy(),
                fin.multi.joint_accuracy(),
                fin.all().joint_accuracy(),
            ));
        }
    }
    write_jsonl(&a.out.join("report.jsonl"), &rows)?;
    println!(
        "{:<24} {:>5} {:>12} {:>12} {:>12} {:>12}",
        "variant", "seed", "s2 loss", "s2 joint", "final multi", "final joint"
    );
    for (v, seed, loss, s2, multi, all) in summary {
        println!(
            "{:<24} {seed:>5} {loss:>12.4} {s2:>12.3} {multi:>12.3} {all:>12.3}",
            v.name()
        );
    }
    println!("report {}", a.out.join("report.jsonl").display());
    Ok(())
}

fn curate_cmd(a: &CurateArgs) -> Result<()> {
    let clips = match (&a.manifest, a.synthetic) {
        (Some(p), _) => read_clip_manifest(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(n)) => synthetic_corpus(n, 6, 16, 0.1, 0),
        (None, None) => bail!("either --manifest or --synthetic is required"),
    };
    let cfg = CurationConfig {
        tau_face: a.tau_face,
        tau_voice: a.tau_voice,
        max_overlap: a.max_overlap,
    };
    let cur = curate(&clips, &cfg)?;
    let groups: Vec<_> = cur
        .groups
        .iter()
        .map(|g| {
            json!({
                "group_id": g.group_id,
                "clips": g.members.iter().map(|&i| clips[i].clip_id.as_str()).collect::<Vec<_>>(),
                "provenance": g.provenance,
                "singleton": g.singleton,
            })
        })
        .collect();
    let pairs: Vec<_> = cur
        .pairs
        .iter()
        .map(|p| serde_json::to_value(p).expect("pair"))
        .collect();
    write_jsonl(&a.out.join("groups.jsonl"), &groups)?;
    write_jsonl(&a.out.join("pairs.jsonl"), &pairs)?;
    println!(
        "{} clips -> {} groups ({} singletons), {} pairs",
        clips.len(),
        cur.groups.len(),
        cur.groups.iter().filter(|g| g.singleton).count(),
        cur.pairs.len()
    );
    Ok(())
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let cfg = experiment(cli.config.as_deref(), cli.seed)?;
    let exp = Experiment::new(cfg)?;
    let w = &exp.world.cfg;
    if a.subjects == 0 || a.subjects > w.max_subjects {
        bail!("--subjects must be between 1 and {}", w.max_subjects);
    }
    let opts = SpecOptions {
        subjects: Some(a.subjects),
        views: a.views,
        pose: PoseMode::Uniform {
            max_deg: w.pose_max_deg,
        },
    };
    let kind = if a.views > 1 {
        SceneKind::Multiview
    } else {
        SceneKind::Paired
    };
    let scene = make_scene(&exp.world, kind, 0, exp.cfg.seed, Split::Eval, &opts)?;
    let (gh, gw) = w.grid();
    let mut layout = SceneLayout {
        video: Some((w.frames, gh, gw)),
        audio: Some((w.audio_steps, w.sigma())),
        ..SceneLayout::default()
    };
    for rf in &scene.scene.references {
        let vt = exp.prep.codec.tokenize_reference(&ReferenceSignal {
            payload: ReferencePayload::Visual(rf.views.clone()),
            identity_slot: rf.slot,
        })?;
        let (rh, rw) = vt.patch_grid.expect("visual grid");
        layout.visual_refs.push((rf.slot, rh, rw));
        let at = exp.prep.codec.tokenize_reference(&ReferenceSignal {
            payload: ReferencePayload::Auditory(rf.wave.clone()),
            identity_slot: rf.slot,
        })?;
        layout.audio_refs.push((rf.slot, at.tokens.rows()));
    }
    let pos = assign_positions(&layout, &exp.prep.positions)?;
    println!(
        "# base {} k_max {} max_audio_ref {}",
        pos.base, exp.prep.positions.k_max, exp.prep.positions.max_audio_ref
    );
    println!("# video tower: index role slot t h w");
    print!("{}", pos.video.dump());
    println!("# audio tower: index role slot t h w");
    print!("{}", pos.audio.dump());
    Ok(())
}
