//! End-to-end acceptance checks, one line per criterion.
//!
//! Everything runs inside one test so that the throughput measurement is
//! not competing with other test threads. `ACCEPTANCE=2,7` runs a subset.
//! The 6,000-pair training set is cached under the cargo target directory
//! and regenerated whenever a spot check against fresh samples disagrees.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neuroface::aubridge::{write_au_csv, AuFrame, AuVector, NormalizationTable, AU_NAMES, NUM_AUS};
use neuroface::datagen::{
    generate_dataset, read_dataset, sample_activation, sample_rng, synthesize, write_dataset_csv, Dataset,
    GenerateOptions,
};
use neuroface::multibody::{GeneralizedState, LinkDoc, SpineDocument, SpineModel};
use neuroface::muscle::{
    bundled_neck_muscles, contractile_force, force_velocity, muscle_geometry, passive_force, KinematicPose, MuscleState,
};
use neuroface::neurocontrol::{HeadPoseTarget, NeckSimulation, PHYSICS_DT};
use neuroface::nn::{init_mlp, Mlp, ParamRef, NUM_OUTPUTS, NUM_WEIGHTS};
use neuroface::pipeline::{evaluate_transfer, sha256_hex, transfer_sequence, ModelBundle, Models, RunConfig};

const EXE: &str = env!("CARGO_BIN_EXE_neuroface");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&Shared) -> Result<Verdict, String>;

/// State reused across criteria: models, the training set and the trained
/// network.
struct Shared {
    config: RunConfig,
    models: Models,
    dataset: OnceLock<Dataset>,
    trained: OnceLock<(Mlp, f64, Duration)>,
}

impl Shared {
    fn dataset(&self) -> Result<&Dataset, String> {
        if let Some(d) = self.dataset.get() {
            return Ok(d);
        }
        let d = cached_dataset(&self.models, &self.config.generate_options())?;
        Ok(self.dataset.get_or_init(|| d))
    }

    fn trained(&self) -> Result<&(Mlp, f64, Duration), String> {
        if let Some(t) = self.trained.get() {
            return Ok(t);
        }
        let d = self.dataset()?;
        let tc = self.config.train.to_train_config();
        let mut mlp = init_mlp(tc.seed);
        let t = Instant::now();
        let report = mlp.train(&d.pairs(), &tc).map_err(|e| e.to_string())?;
        let took = t.elapsed();
        mlp.normalization = Some(d.table.clone());
        Ok(self.trained.get_or_init(|| (mlp, report.final_loss(), took)))
    }
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    std::fs::create_dir_all(&dir).expect("create acceptance directory");
    dir
}

/// The cached set is trusted only if the first draw of every expression
/// re-synthesizes to the same raw AUs bit for bit.
fn cached_dataset(models: &Models, opts: &GenerateOptions) -> Result<Dataset, String> {
    let key = sha256_hex(format!("{opts:?}{}", env!("CARGO_PKG_VERSION")).as_bytes());
    let path = work_dir("cache").join(format!("dataset-{}.csv", &key[..16]));
    if let Ok(d) = read_dataset(&path) {
        if spot_check(models, opts, &d) {
            return Ok(d);
        }
        eprintln!("cached dataset at {} is stale; regenerating", path.display());
    }
    eprintln!(
        "generating {} pairs into {} (slow on first run)",
        6 * opts.n_per_expression,
        path.display()
    );
    let d = generate_dataset(&models.face, &models.oracle, &models.expressions, opts).map_err(|e| e.to_string())?;
    std::fs::write(&path, write_dataset_csv(&d)).map_err(|e| e.to_string())?;
    Ok(d)
}

fn spot_check(models: &Models, opts: &GenerateOptions, d: &Dataset) -> bool {
    if d.samples.len() != models.expressions.len() * opts.n_per_expression {
        return false;
    }
    models.expressions.iter().enumerate().all(|(e, set)| {
        let index = (e * 2 * opts.n_per_expression) as u64;
        let a = sample_activation(set, &mut sample_rng(opts.seed, index));
        let first = &d.samples[e * opts.n_per_expression];
        first.activations == a
            && synthesize(&models.face, &models.oracle, &a, &opts.settle).is_ok_and(|aus| aus == first.raw_aus)
    })
}

// ------------------------------------------------------------------ criteria

fn weight_count(_: &Shared) -> Result<Verdict, String> {
    let t = Instant::now();
    let m = init_mlp(0);
    let n = m.weight_count();
    let took = t.elapsed();
    Ok(verdict(
        n == 37_300 && NUM_WEIGHTS == 37_300 && took < Duration::from_secs(1),
        format!("{n} weights (expected 37300), built in {took:.2?} (< 1 s)"),
    ))
}

fn training(s: &Shared) -> Result<Verdict, String> {
    let n = s.dataset()?.samples.len();
    let epochs = s.config.train.to_train_config().epochs;
    let (_, loss, took) = s.trained()?;
    Ok(verdict(
        n == 6000 && epochs <= 100 && *loss <= 0.005 && *took <= Duration::from_secs(600),
        format!("{n} pairs, final MSE {loss:.6} after {epochs} epochs (<= 0.005), trained in {took:.1?} (<= 10 min)"),
    ))
}

fn gradient(_: &Shared) -> Result<Verdict, String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for case in 0..100 {
        let m = init_mlp(1000 + case);
        // Keep every hidden unit away from its kink so the difference quotient
        // is taken on one side of each ReLU.
        let (x, t) = loop {
            let x = DMatrix::from_fn(NUM_AUS, 2, |_, _| rng.gen_range(0.0..1.0));
            if m.min_hidden_margin(&x) > 1e-3 {
                break (x, DMatrix::from_fn(NUM_OUTPUTS, 2, |_, _| rng.gen_range(0.0..1.0)));
            }
        };
        let (_, g) = m.loss_and_gradient(&x, &t).map_err(|e| e.to_string())?;
        let layer = case as usize % m.weights().len();
        let w = &m.weights()[layer];
        for bias in [false, true] {
            let p = ParamRef {
                layer,
                bias,
                row: rng.gen_range(0..w.nrows()),
                col: if bias { 0 } else { rng.gen_range(0..w.ncols()) },
            };
            let num = m.numeric_derivative(&x, &t, p, 1e-5).map_err(|e| e.to_string())?;
            let ana = g.get(p);
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            checked += 1;
        }
    }
    let took = t.elapsed();
    Ok(verdict(
        worst < 1e-4 && took < Duration::from_secs(60),
        format!("{checked} derivatives over 100 nets, max relative error {worst:.2e} (< 1e-4), {took:.1?} (< 1 min)"),
    ))
}

fn muscle_laws(_: &Shared) -> Result<Verdict, String> {
    let spine = SpineModel::bundled();
    let muscles = bundled_neck_muscles(&spine);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut out_of_range = 0;
    for m in &muscles {
        let p = &m.params;
        let rest = MuscleState {
            l: p.l_0,
            ldot: 0.0,
            e: 0.0,
            edot: 0.0,
            a: 0.0,
        };
        worst = worst.max(passive_force(p, &rest).abs());
        worst = worst.max((force_velocity(p, 0.0) - 1.0).abs());
        worst = worst.max(force_velocity(p, -p.v_m).abs());
        for _ in 0..10_000 / muscles.len() + 1 {
            let l = p.l_0 * rng.gen_range(0.5..1.5);
            let ldot = p.v_m * rng.gen_range(-3.0..3.0);
            let s = MuscleState::new(p, l, ldot, 0.0);
            worst = worst.max(contractile_force(p, &s).abs());
            let fv = force_velocity(p, ldot);
            if !(0.0..=1.0).contains(&fv) {
                out_of_range += 1;
            }
        }
    }
    Ok(verdict(
        worst <= 1e-12 && out_of_range == 0,
        format!(
            "{} muscles: worst deviation {worst:.1e} (<= 1e-12), F_v outside [0,1] in {out_of_range} draws",
            muscles.len()
        ),
    ))
}

fn link(name: &str, parent: Option<&str>, mass: f64, inertia: f64, com: [f64; 3]) -> LinkDoc {
    LinkDoc {
        name: name.into(),
        parent: parent.map(Into::into),
        joint_origin: parent.map(|_| [0.0; 3]),
        mass,
        inertia: [[inertia, 0.0, 0.0], [0.0, inertia, 0.0], [0.0, 0.0, inertia]],
        com,
        spring: None,
        limits: None,
    }
}

fn pendulum_period_error() -> Result<f64, String> {
    let (mass, r, ic, g) = (1.0, 0.25, 2e-3, 9.81);
    let m = SpineModel::from_document(&SpineDocument {
        gravity: [0.0, -g, 0.0],
        links: vec![
            link("base", None, 1.0, 0.01, [0.0; 3]),
            link("bob", Some("base"), mass, ic, [0.0, -r, 0.0]),
        ],
    })
    .map_err(|e| e.to_string())?;
    let expected = 2.0 * std::f64::consts::PI * ((ic + mass * r * r) / (mass * g * r)).sqrt();
    let (p, f) = (DMatrix::zeros(3, 0), DVector::zeros(0));
    let mut s = GeneralizedState::zeros(3);
    s.q[0] = 0.05;
    let mut crossings = Vec::new();
    for i in 0..(10.0 / PHYSICS_DT) as usize {
        let next = m
            .step_dynamics(&s, &p, &f, &[], PHYSICS_DT)
            .map_err(|e| e.to_string())?;
        if s.q[0] < 0.0 && next.q[0] >= 0.0 {
            crossings.push((i as f64 - s.q[0] / (next.q[0] - s.q[0])) * PHYSICS_DT);
        }
        s = next;
    }
    if crossings.len() < 3 {
        return Err("pendulum did not swing".into());
    }
    let measured = (crossings[crossings.len() - 1] - crossings[0]) / (crossings.len() - 1) as f64;
    Ok((measured - expected).abs() / expected)
}

fn multibody(_: &Shared) -> Result<Verdict, String> {
    let period = pendulum_period_error()?;
    let spine = SpineModel::bundled();
    let muscles = bundled_neck_muscles(&spine);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = spine.dof();
    let mut asym: f64 = 0.0;
    let mut work: f64 = 0.0;
    for trial in 0..20 {
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-0.4..0.4));
        let qdot = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
        let mm = spine.mass_matrix(&q);
        asym = asym.max((&mm - mm.transpose()).abs().max());
        if trial % 2 == 0 {
            let p = spine.moment_arm_matrix(&muscles, &q).map_err(|e| e.to_string())?;
            let frames = spine.forward_kinematics(&q, Some(&qdot));
            let pose = KinematicPose::links_only(&frames);
            for (j, m) in muscles.iter().enumerate() {
                let (_, ldot) = muscle_geometry(&m.path, &pose).map_err(|e| e.to_string())?;
                let joint = -p.column(j).dot(&qdot);
                work = work.max((ldot - joint).abs() / ldot.abs().max(1e-6));
            }
        }
    }
    Ok(verdict(
        period < 0.01 && asym <= 1e-12 && work <= 1e-3,
        format!(
            "period error {:.3}% (< 1%), mass-matrix asymmetry {asym:.1e} (<= 1e-12), virtual-work error {work:.1e} (<= 1e-3)",
            100.0 * period
        ),
    ))
}

fn controller(s: &Shared) -> Result<Verdict, String> {
    let m = &s.models;
    let cfg = s.config.controller.to_config();
    let steps = |t: f64| (t / PHYSICS_DT).round() as usize;
    let mut sim =
        NeckSimulation::new(&m.spine, &m.neck_muscles, cfg.clone(), m.spine.rest_state()).map_err(|e| e.to_string())?;
    let goal = 15f64.to_radians();
    sim.set_target(HeadPoseTarget {
        pitch: goal,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    // Steady state: the last quarter second before the 2 s mark.
    let mut tail: f64 = 0.0;
    for i in 0..steps(2.0) {
        sim.step().map_err(|e| e.to_string())?;
        if i >= steps(1.75) {
            tail = tail.max((sim.head_orientation().x - goal).abs());
        }
    }
    let mut rest =
        NeckSimulation::new(&m.spine, &m.neck_muscles, cfg, m.spine.rest_state()).map_err(|e| e.to_string())?;
    let mut drift: f64 = 0.0;
    for _ in 0..steps(5.0) {
        rest.step().map_err(|e| e.to_string())?;
        drift = drift.max(rest.head_orientation().amax()).max(rest.state.q.amax());
    }
    let (tail, drift) = (tail.to_degrees(), drift.to_degrees());
    Ok(verdict(
        tail <= 2.0 && drift <= 1.0,
        format!("15° pitch within {tail:.2}° over 1.75-2 s (<= 2°), rest drift {drift:.3}° over 5 s (<= 1°)"),
    ))
}

fn held_out(s: &Shared) -> Result<Dataset, String> {
    let opts = GenerateOptions {
        n_per_expression: 10,
        seed: s.config.seed + 1,
        ..s.config.generate_options()
    };
    let m = &s.models;
    generate_dataset(&m.face, &m.oracle, &m.expressions, &opts).map_err(|e| e.to_string())
}

fn frames_of(raw: &[AuVector]) -> Vec<AuFrame> {
    raw.iter()
        .enumerate()
        .map(|(i, aus)| AuFrame {
            aus: *aus,
            pose: [0.05 * (i % 3) as f64, -0.04 * (i % 2) as f64, 0.0],
            timestamp: i as f64 / 25.0,
            ..AuFrame::neutral(i as u64)
        })
        .collect()
}

fn bundle(s: &Shared) -> Result<ModelBundle, String> {
    let (mlp, _, _) = s.trained()?;
    Ok(ModelBundle::new(mlp.clone(), Models::bundled(), &s.config))
}

fn round_trip(s: &Shared) -> Result<Verdict, String> {
    let b = bundle(s)?;
    let table = b.mlp.normalization.clone().ok_or("trained model has no table")?;
    let test = held_out(s)?;
    let raw: Vec<AuVector> = test.samples.iter().map(|x| x.raw_aus).collect();
    let frames = frames_of(&raw);
    let results = transfer_sequence(&b, &frames, Some(&table)).map_err(|e| e.to_string())?;
    let reference: Vec<AuVector> = raw.iter().map(|r| table.apply_clamped(r)).collect();
    let e = evaluate_transfer(&results, &reference).map_err(|e| e.to_string())?;
    Ok(verdict(
        e.frames == 60 && e.average <= 0.05,
        format!(
            "{} held-out frames, average AU MSE {:.5} (<= 0.05)",
            e.frames, e.average
        ),
    ))
}

fn frame_independence(s: &Shared) -> Result<Verdict, String> {
    let b = bundle(s)?;
    let table = b.mlp.normalization.clone().ok_or("trained model has no table")?;
    let d = s.dataset()?;
    let raw: Vec<AuVector> = d.samples.iter().step_by(601).take(10).map(|x| x.raw_aus).collect();
    let frames = frames_of(&raw);
    let seq = transfer_sequence(&b, &frames, Some(&table)).map_err(|e| e.to_string())?;
    if !seq.failures.is_empty() {
        return Err(format!("sequence transfer failed on {:?}", seq.failures));
    }
    let mut differing = Vec::new();
    for (f, r) in frames.iter().zip(&seq.frames) {
        let one = transfer_sequence(&b, std::slice::from_ref(f), Some(&table)).map_err(|e| e.to_string())?;
        let r1 = one
            .frames
            .first()
            .ok_or_else(|| format!("frame {} failed alone: {:?}", f.frame, one.failures))?;
        if r1.activations != r.activations || r1.positions != r.positions || r1.raw_aus != r.raw_aus {
            differing.push(f.frame);
        }
    }
    Ok(verdict(
        seq.frames.len() == 10 && differing.is_empty(),
        format!(
            "{}-frame sequence vs single-frame transfers: activations, meshes and AUs {}",
            seq.frames.len(),
            if differing.is_empty() {
                "bit-identical".to_string()
            } else {
                format!("differ in frames {differing:?}")
            }
        ),
    ))
}

/// Collects warnings so the degenerate-column message can be checked.
struct Capture(Mutex<Vec<String>>);

impl log::Log for Capture {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }
    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            self.0.lock().unwrap().push(r.args().to_string());
        }
    }
    fn flush(&self) {}
}

static WARNINGS: Capture = Capture(Mutex::new(Vec::new()));

fn normalization(_: &Shared) -> Result<Verdict, String> {
    let _ = log::set_logger(&WARNINGS).map(|()| log::set_max_level(log::LevelFilter::Warn));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rows: Vec<AuVector> = (0..200)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..5.0)))
        .collect();
    for r in &mut rows {
        r[3] = 1.25;
    }
    WARNINGS.0.lock().unwrap().clear();
    let t = NormalizationTable::fit(&rows).map_err(|e| e.to_string())?;
    let warned = WARNINGS.0.lock().unwrap().iter().any(|w| w.contains(AU_NAMES[3]));
    let norm: Vec<AuVector> = rows.iter().map(|r| t.apply(r)).collect();
    let attains = (0..NUM_AUS).filter(|&k| k != 3).all(|k| {
        norm.iter().any(|r| r[k] == 0.0)
            && norm.iter().any(|r| r[k] == 1.0)
            && norm.iter().all(|r| (0.0..=1.0).contains(&r[k]))
    });
    let degenerate = t.degenerate() == [3] && norm.iter().all(|r| r[3] == 0.0);
    let again = NormalizationTable::fit(&norm).map_err(|e| e.to_string())?;
    let idempotent = norm.iter().all(|r| again.apply(r) == *r);
    Ok(verdict(
        attains && degenerate && warned && idempotent,
        format!(
            "attains {{0,1}}: {attains}, constant column -> 0: {degenerate}, warned: {warned}, idempotent: {idempotent}"
        ),
    ))
}

fn run(args: &[&str]) -> Result<String, String> {
    let out = Command::new(EXE).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`neuroface {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn performance(_: &Shared) -> Result<Verdict, String> {
    let out = run(&["simulate", "--benchmark"])?;
    let rate = |label: &str| -> Result<f64, String> {
        out.lines()
            .find_map(|l| l.strip_prefix(label))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| format!("no `{label}` line in benchmark output"))
    };
    let coupled = rate("coupled steps/s")?;
    Ok(verdict(
        coupled >= 4000.0,
        format!(
            "coupled neck+face {coupled:.0} steps/s (>= 4000); neck alone {:.0}, face alone {:.0}",
            rate("neck steps/s")?,
            rate("face steps/s")?
        ),
    ))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).expect("read output directory").flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn determinism(_: &Shared) -> Result<Verdict, String> {
    let root = work_dir("determinism");
    let mut listings = Vec::new();
    for r in ["a", "b"] {
        let dir = root.join(r);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
        run(&[
            "datagen",
            "--out",
            &p("data.csv"),
            "--n-per-expression",
            "2",
            "--seed",
            "11",
        ])?;
        run(&[
            "train",
            "--dataset",
            &p("data.csv"),
            "--out",
            &p("model.bin"),
            "--epochs",
            "3",
        ])?;
        let d = read_dataset(&dir.join("data.csv")).map_err(|e| e.to_string())?;
        let raw: Vec<AuVector> = d.samples.iter().take(4).map(|x| x.raw_aus).collect();
        std::fs::write(dir.join("input.csv"), write_au_csv(&frames_of(&raw))).map_err(|e| e.to_string())?;
        run(&[
            "transfer",
            "--model",
            &p("model.bin"),
            "--input",
            &p("input.csv"),
            "--out",
            &p("anim"),
            "--neck-time",
            "0.25",
        ])?;
        let files: Vec<(PathBuf, Vec<u8>)> = files_under(&dir)
            .into_iter()
            .map(|f| (f.strip_prefix(&dir).unwrap().to_path_buf(), std::fs::read(&f).unwrap()))
            .collect();
        listings.push(files);
    }
    let (a, b) = (&listings[0], &listings[1]);
    let differing: Vec<String> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let same = a.len() == b.len() && differing.is_empty();
    Ok(verdict(
        same,
        format!(
            "{} files from datagen, train and transfer; {} differ between runs{}",
            a.len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(": {}", differing.join(", "))
            }
        ),
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, Check); 11] = [
        ("architecture", weight_count),
        ("training convergence", training),
        ("gradient correctness", gradient),
        ("muscle laws", muscle_laws),
        ("multibody fidelity", multibody),
        ("controller step response", controller),
        ("round-trip transfer", round_trip),
        ("frame independence", frame_independence),
        ("normalization", normalization),
        ("performance", performance),
        ("determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let shared = Shared {
        config: RunConfig::default(),
        models: Models::bundled(),
        dataset: OnceLock::new(),
        trained: OnceLock::new(),
    };
    let mut lines = Vec::new();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match check(&shared) {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        let line = format!(
            "[{}] {id:>2}. {name}: {detail} ({:.1?})",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed()
        );
        // Straight to the process stdout, past the harness capture, so the
        // report shows up in plain `cargo test` output too.
        let _ = writeln!(std::io::stdout(), "{line}");
        lines.push(line);
    }
    let _ = writeln!(std::io::stdout(), "\nacceptance summary\n{}", lines.join("\n"));
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
