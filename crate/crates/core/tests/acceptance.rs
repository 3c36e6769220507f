//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Built with `harness = false` so the report is always printed.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use adaptseg::adapters::{attach, param_report, Preset};
use adaptseg::autodiff::{CountFilter, Origin, Tensor};
use adaptseg::checkpoint::{load_checkpoint, save_checkpoint, to_bytes};
use adaptseg::cli::{cmd_finetune, history_path, FinetuneArgs, PresetArg};
use adaptseg::data::{export_folder, gen_synthetic, Domain, SegmentationSample, SyntheticSpec};
use adaptseg::diagnostics::{gradient_suite, GRAD_CHECK_TOL};
use adaptseg::mask::BinaryMask;
use adaptseg::model::{ClickLabel, ClickPrompt, ModelConfig, SegModel, Segmenter};
use adaptseg::prompting::Protocol;
use adaptseg::train::{dice, evaluate, iou, train, EvalReport, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, name: &str, started: Instant, outcome: Result<String, String>) {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_oracles() -> Result<String, String> {
    let results = gradient_suite().map_err(|e| e.to_string())?;
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    ensure(failed.is_empty(), || format!("failed: {failed:?}"))?;
    Ok(format!(
        "{} checks, worst {} at {:.2e} (< {GRAD_CHECK_TOL:e})",
        results.len(),
        worst.name,
        worst.max_rel_error
    ))
}

fn zero_init_identity() -> Result<String, String> {
    let base = SegModel::new(ModelConfig::default(), 0).map_err(|e| e.to_string())?;
    let cfg = base.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut adapted = Vec::new();
    for p in Preset::ADAPTED {
        let mut m = base.clone();
        attach(&mut m, p.spec(), 1).map_err(|e| e.to_string())?;
        adapted.push((p, m));
    }
    for i in 0..10 {
        let n = cfg.image_size * cfg.image_size;
        let img = Tensor::new(
            vec![cfg.image_size, cfg.image_size, 1],
            (0..n).map(|_| rng.gen()).collect(),
        )
        .unwrap();
        let clicks = [ClickPrompt::positive(
            rng.gen_range(0..cfg.image_size),
            rng.gen_range(0..cfg.image_size),
        )];
        let want = base
            .predict(&img, &clicks)
            .map_err(|e| e.to_string())?
            .prob_map;
        for (p, m) in &adapted {
            let got = m
                .predict(&img, &clicks)
                .map_err(|e| e.to_string())?
                .prob_map;
            ensure(got == want, || {
                format!("{} differs from base on image {i}", p.name())
            })?;
        }
    }
    Ok("10 images x 3 presets bit-identical".into())
}

fn param_accounting() -> Result<String, String> {
    let trainable = |p: Preset| {
        let mut m = SegModel::new(ModelConfig::default(), 0).unwrap();
        attach(&mut m, p.spec(), 0).unwrap();
        m.registry_mut().apply_freeze_policy();
        param_report(m.registry(), &m.placement())
    };
    let med = trainable(Preset::MedSa);
    let gmed = trainable(Preset::GmedSa);
    let glmed = trainable(Preset::GlmedSa);
    let t = |r: &adaptseg::adapters::ParamReportRow| r.trainable_params;
    ensure(t(&glmed) == t(&med) + t(&gmed), || {
        format!("{} != {} + {}", t(&glmed), t(&med), t(&gmed))
    })?;
    ensure(t(&glmed) == 51_072, || {
        format!("GLMED_SA trainable {}", t(&glmed))
    })?;
    ensure(glmed.trainable_fraction < 0.10, || {
        format!("fraction {}", glmed.trainable_fraction)
    })?;
    Ok(format!(
        "MED_SA {} + GMED_SA {} = GLMED_SA {} of {} total ({:.2}%)",
        t(&med),
        t(&gmed),
        t(&glmed),
        glmed.total_params,
        100.0 * glmed.trainable_fraction
    ))
}

/// Brute-force pixel counting, independent of the library's overlap code.
fn oracle_counts(a: &[bool], b: &[bool]) -> (u64, u64, u64) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (&p, &g) in a.iter().zip(b) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fneg)
}

fn metric_oracles() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for k in 0..1000 {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let (pa, pb) = (rng.gen::<f64>(), rng.gen::<f64>());
        let a: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(pa)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(pb)).collect();
        let (tp, fp, fneg) = oracle_counts(&a, &b);
        let want_dice = if tp + fp + fneg == 0 {
            1.0
        } else {
            (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
        };
        let want_iou = if tp + fp + fneg == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp + fneg) as f64
        };
        let ma = BinaryMask::new(h, w, a).unwrap();
        let mb = BinaryMask::new(h, w, b).unwrap();
        let (d, j) = (dice(&ma, &mb).unwrap(), iou(&ma, &mb).unwrap());
        ensure(d == want_dice && j == want_iou, || {
            format!("pair {k}: dice {d} vs {want_dice}, iou {j} vs {want_iou}")
        })?;
    }
    Ok("1000 random pairs exact".into())
}

fn adapter_name(param: &str) -> String {
    param.rsplitn(3, '.').nth(2).unwrap().to_string()
}

fn freeze_invariance(
    ckpt: &std::path::Path,
    data: &[SegmentationSample],
) -> Result<String, String> {
    let mut details = Vec::new();
    for p in Preset::ADAPTED {
        let mut m = load_checkpoint(ckpt).map_err(|e| e.to_string())?;
        attach(&mut m, p.spec(), 0).map_err(|e| e.to_string())?;
        let before = m.registry().clone();
        let tc = TrainConfig {
            max_steps: Some(50),
            ..TrainConfig::finetune(p)
        };
        train(&mut m, data, &tc).map_err(|e| e.to_string())?;
        let saved = load_checkpoint(ckpt).map_err(|e| e.to_string())?;
        let mut changed: BTreeMap<String, bool> = BTreeMap::new();
        for (id, e) in m.registry().iter() {
            let now = m.registry().tensor(id).data();
            match e.origin {
                Origin::Base => {
                    let sid = saved.registry().id(&e.name).map_err(|e| e.to_string())?;
                    let then = saved.registry().tensor(sid).data();
                    ensure(
                        now.iter()
                            .zip(then)
                            .all(|(a, b)| a.to_bits() == b.to_bits()),
                        || format!("{}: base parameter {} moved", p.name(), e.name),
                    )?;
                }
                Origin::Adapter => {
                    let moved = now != before.tensor(id).data();
                    *changed.entry(adapter_name(&e.name)).or_insert(false) |= moved;
                }
            }
        }
        let stuck: Vec<_> = changed
            .iter()
            .filter(|(_, &c)| !c)
            .map(|(n, _)| n.clone())
            .collect();
        ensure(stuck.is_empty(), || {
            format!("{}: unchanged adapters {stuck:?}", p.name())
        })?;
        details.push(format!("{} {} adapters moved", p.name(), changed.len()));
    }
    Ok(format!(
        "50 steps each, base bit-identical; {}",
        details.join(", ")
    ))
}

/// Positive click on the foreground pixel nearest the mask centroid.
fn center_click(mask: &BinaryMask) -> ClickPrompt {
    let (h, w) = mask.dims();
    let fg: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| mask.get(x, y))
        .collect();
    let cx = fg.iter().map(|p| p.0 as f64).sum::<f64>() / fg.len() as f64;
    let cy = fg.iter().map(|p| p.1 as f64).sum::<f64>() / fg.len() as f64;
    let &(x, y) = fg
        .iter()
        .min_by(|a, b| {
            let d = |p: &(usize, usize)| (p.0 as f64 - cx).powi(2) + (p.1 as f64 - cy).powi(2);
            d(a).total_cmp(&d(b))
        })
        .unwrap();
    ClickPrompt::positive(x, y)
}

fn center_click_dice(model: &SegModel, data: &[SegmentationSample]) -> Result<f64, String> {
    let mut total = 0.0;
    for s in data {
        let pred = model
            .predict(&s.image, &[center_click(&s.mask)])
            .map_err(|e| e.to_string())?;
        total += dice(&pred.binary_mask(), &s.mask).map_err(|e| e.to_string())?;
    }
    Ok(total / data.len() as f64)
}

fn check_iterative_clicks(
    report: &EvalReport,
    data: &[SegmentationSample],
) -> Result<usize, String> {
    let mut n = 0;
    for (outcome, s) in report.samples.iter().zip(data) {
        ensure(outcome.id == s.id, || {
            format!("outcome {} vs sample {}", outcome.id, s.id)
        })?;
        let ia = &outcome.interaction;
        ensure(
            ia.clicks.len() <= 3 && ia.rounds.len() == ia.clicks.len(),
            || {
                format!(
                    "{}: {} clicks, {} rounds",
                    s.id,
                    ia.clicks.len(),
                    ia.rounds.len()
                )
            },
        )?;
        let first = ia.clicks[0];
        ensure(s.mask.get(first.x, first.y), || {
            format!("{}: initial click off foreground", s.id)
        })?;
        for k in 1..ia.rounds.len() {
            let c = ia.clicks[k];
            let err = ia.rounds[k - 1]
                .mask
                .xor(&s.mask)
                .map_err(|e| e.to_string())?;
            ensure(err.get(c.x, c.y), || {
                format!("{}: click {k} outside the error region", s.id)
            })?;
            ensure(
                c.label == ClickLabel::from_foreground(s.mask.get(c.x, c.y)),
                || format!("{}: click {k} label disagrees with ground truth", s.id),
            )?;
            n += 1;
        }
    }
    Ok(n)
}

fn main() {
    let mut report = Report { failures: 0 };
    let run_started = Instant::now();

    let t = Instant::now();
    report.check("gradient oracle suite", t, gradient_oracles());
    let t = Instant::now();
    report.check("zero-init identity", t, zero_init_identity());
    let t = Instant::now();
    report.check("parameter accounting", t, param_accounting());
    let t = Instant::now();
    report.check("metric oracles", t, metric_oracles());

    // Desk-scale transfer experiment on the compact geometry.
    let cfg = ModelConfig::compact();
    let gen = |domain, n, seed| {
        gen_synthetic(&SyntheticSpec::new(domain, n, cfg.image_size, seed)).unwrap()
    };
    let source = gen(Domain::Source, 500, 0);
    let target_train = gen(Domain::Target, 200, 1);
    let target_eval = gen(Domain::Target, 100, 2);
    let source_eval = gen(Domain::Source, 100, 3);

    let t = Instant::now();
    let mut base = SegModel::new(cfg.clone(), 0).unwrap();
    train(&mut base, &source, &TrainConfig::pretrain()).expect("pretraining");
    let pretrain_secs = t.elapsed().as_secs_f64();
    let work = tempfile::tempdir().unwrap();
    let base_ckpt = work.path().join("base.ckpt");
    save_checkpoint(&base, &base_ckpt, false).unwrap();

    let t = Instant::now();
    report.check(
        "freeze invariance",
        t,
        freeze_invariance(&base_ckpt, &target_train),
    );

    let t = Instant::now();
    let mut rows = Vec::new();
    let transfer = (|| -> Result<String, String> {
        let err = |e: adaptseg::Error| e.to_string();
        let base_target = evaluate(&base, &target_eval, Protocol::OnePoint, 0).map_err(err)?;
        let base_source = evaluate(&base, &source_eval, Protocol::OnePoint, 0).map_err(err)?;
        let mut lines = vec![format!(
            "pretrain {pretrain_secs:.0}s; base 1-point dice: source {:.4}, target {:.4}",
            base_source.row.dice, base_target.row.dice
        )];
        for p in Preset::ADAPTED {
            let mut m = base.clone();
            attach(&mut m, p.spec(), 0).map_err(err)?;
            train(&mut m, &target_train, &TrainConfig::finetune(p)).map_err(err)?;
            let one = evaluate(&m, &target_eval, Protocol::OnePoint, 0).map_err(err)?;
            let three = evaluate(&m, &target_eval, Protocol::ThreePoints, 0).map_err(err)?;
            for o in &one.samples {
                ensure(o.iou() <= o.dice(), || {
                    format!("{} {}: iou {} > dice {}", p.name(), o.id, o.iou(), o.dice())
                })?;
            }
            ensure(one.row.dice >= base_target.row.dice + 0.15, || {
                format!(
                    "{} dice {:.4} vs base {:.4}",
                    p.name(),
                    one.row.dice,
                    base_target.row.dice
                )
            })?;
            lines.push(format!(
                "{} {:.4} (+{:.4})",
                p.name(),
                one.row.dice,
                one.row.dice - base_target.row.dice
            ));
            rows.push((p, m, one, three));
        }
        let glmed = &rows[2].2.row;
        ensure(glmed.dice >= 0.85, || {
            format!("GLMED_SA dice {:.4} < 0.85", glmed.dice)
        })?;
        let med3 = rows[0].3.row.dice;
        lines.push(format!(
            "ordering (reported only): GLMED_SA 1-point {:.4} {} MED_SA 3-points {:.4}",
            glmed.dice,
            if glmed.dice > med3 { ">" } else { "<=" },
            med3
        ));
        Ok(lines.join("; "))
    })();
    report.check("transfer experiment", t, transfer);

    let t = Instant::now();
    let protocol = (|| -> Result<String, String> {
        ensure(rows.len() == 3, || {
            "transfer experiment did not finish".into()
        })?;
        let mut lines = Vec::new();
        let mut checked = 0;
        for (p, _, one, three) in &rows {
            checked += check_iterative_clicks(three, &target_eval)?;
            ensure(three.row.dice >= one.row.dice - 0.02, || {
                format!(
                    "{}: 3-points {:.4} < 1-point {:.4} - 0.02",
                    p.name(),
                    three.row.dice,
                    one.row.dice
                )
            })?;
            lines.push(format!(
                "{} 1-point {:.4} -> 3-points {:.4}",
                p.name(),
                one.row.dice,
                three.row.dice
            ));
        }
        Ok(format!(
            "{}; {checked} iterative clicks all in the error region",
            lines.join(", ")
        ))
    })();
    report.check("interaction protocol", t, protocol);

    let t = Instant::now();
    let centered = (|| -> Result<String, String> {
        let d = center_click_dice(&base, &source_eval)?;
        ensure(d >= 0.85, || format!("source blob-center dice {d:.4}"))?;
        Ok(format!(
            "pretrained base, click at blob center on source: dice {d:.4}"
        ))
    })();
    report.check("blob-center click (supplementary)", t, centered);

    let t = Instant::now();
    let determinism = (|| -> Result<String, String> {
        let data_dir = work.path().join("target");
        export_folder(&data_dir, &target_train[..40], None).map_err(|e| e.to_string())?;
        let out = work.path().join("glmed.ckpt");
        let mut args = FinetuneArgs {
            ckpt: base_ckpt.clone(),
            preset: PresetArg::GlmedSa,
            data: data_dir,
            out: out.clone(),
            epochs: 2,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            force: false,
            manifest: None,
        };
        let read = |p: &std::path::Path| fs::read(p).map_err(|e| e.to_string());
        cmd_finetune(&args).map_err(|e| e.to_string())?;
        let (ckpt1, hist1) = (read(&out)?, read(&history_path(&out))?);
        args.force = true;
        cmd_finetune(&args).map_err(|e| e.to_string())?;
        let (ckpt2, hist2) = (read(&out)?, read(&history_path(&out))?);
        ensure(ckpt1 == ckpt2, || "checkpoints differ".into())?;
        ensure(hist1 == hist2, || "histories differ".into())?;
        let reloaded = load_checkpoint(&out).map_err(|e| e.to_string())?;
        ensure(to_bytes(&reloaded) == ckpt1, || {
            "checkpoint does not round-trip".into()
        })?;
        ensure(
            reloaded.registry().count(CountFilter::Trainable) == 4 * 3 * (32 * 8 + 8 + 8 * 32 + 32),
            || {
                format!(
                    "unexpected trainable count {}",
                    reloaded.registry().count(CountFilter::Trainable)
                )
            },
        )?;
        Ok(format!(
            "{} checkpoint bytes and {} history bytes identical",
            ckpt1.len(),
            hist1.len()
        ))
    })();
    report.check("determinism", t, determinism);

    println!(
        "acceptance: {} failure(s) in {:.0}s",
        report.failures,
        run_started.elapsed().as_secs_f64()
    );
    if report.failures > 0 {
        std::process::exit(1);
    }
}
