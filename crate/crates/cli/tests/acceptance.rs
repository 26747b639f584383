//! Acceptance suite. Prints one pass/fail line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use camtrap_core::data_model::{balance_test_domains, filter_categories, split_train_test};
use camtrap_core::inference::{argmax, fuse, predict_split, scale_sub_logits, PredictionRecord};
use camtrap_core::losses::{focal_loss, flow_consistency_loss_batch, photometric_loss, warp};
use camtrap_core::metrics::{evaluate, imbalanced_classes, Cell};
use camtrap_core::network::ParamGroup;
use camtrap_core::synthgen::generate_dataset;
use camtrap_core::trainer::{expert_losses, fit, scaled_lr, Sgd, TrainBatch};
use camtrap_core::{
    DatasetManifest, Domain, DomainCounts, ExpertId, ExpertModel, FlowField, FlowPair, LossConfig, ModelConfig,
    SequenceSample, Split, SynthSpec, TrainConfig,
};
use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String>;

fn main() -> ExitCode {
    let criteria: [(&str, Check, Duration); 9] = [
        ("focal loss oracle", focal_oracle, Duration::from_secs(10)),
        ("warp oracle", warp_oracle, Duration::from_secs(30)),
        ("photometric and flow-consistency properties", photometric_properties, Duration::MAX),
        ("gradient routing", gradient_routing, Duration::MAX),
        ("inference algebra", inference_algebra, Duration::MAX),
        ("metrics oracle", metrics_oracle, Duration::MAX),
        ("pipeline determinism", pipeline_determinism, Duration::from_secs(300)),
        ("synthetic trend", synthetic_trend, Duration::from_secs(1800)),
        ("learning-rate scaling", lr_scaling, Duration::MAX),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();

    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            println!("criterion {n} ({name}): SKIP");
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(anyhow::anyhow!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(anyhow::anyhow!("{detail}; over the {budget:?} budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{:.1}s] {detail}", elapsed.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{:.1}s] {e:#}", elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

fn focal_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(2..=8);
        let logits: Vec<f64> = (0..3 * c).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y = rng.random_range(0..c);
        let mut ce = 0.0;
        for frame in logits.chunks(c) {
            let z: f64 = frame.iter().map(|v| v.exp()).sum();
            ce += z.ln() - frame[y];
        }
        let got = scalar(&focal_loss(&tensor(logits, &[3, c]), y, 0.0)?);
        worst = worst.max((got - ce).abs());
    }
    ensure!(worst <= 1e-9, "gamma=0 focal differs from cross-entropy by {worst:e}");

    let value = scalar(&focal_loss(&tensor(vec![0.0; 6], &[3, 2]), 0, 5.0)?);
    let formula = 3.0 * 0.5f64.powi(5) * 2f64.ln();
    ensure!((value - formula).abs() <= 1e-6, "worked value {value} vs 3*0.5^5*ln2 = {formula}");
    let stated = 0.0649778;
    Ok(format!(
        "max |focal(gamma=0) - CE| = {worst:.1e} over 1000 draws; worked value {value:.8} == 3*0.5^5*ln2 \
         (the stated decimal {stated} is off by {:.1e}; the expression is asserted)",
        (formula - stated).abs()
    ))
}

/// Direct per-pixel bilinear sampling at `p + flow(p)` with clamped coordinates.
fn warp_reference(map: &[f64], w: usize, h: usize, flow: &FlowField) -> Vec<f64> {
    let at = |x: i64, y: i64| map[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let [u, v] = flow.get(x, y);
            let sx = (x as f64 + u as f64).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + v as f64).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            let top = at(x0, y0) * (1.0 - ax) + at(x0 + 1, y0) * ax;
            let bottom = at(x0, y0 + 1) * (1.0 - ax) + at(x0 + 1, y0 + 1) * ax;
            out[y * w + x] = top * (1.0 - ay) + bottom * ay;
        }
    }
    out
}

fn warp_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut compare = |map: Vec<f64>, w: usize, h: usize, flow: &FlowField| -> Result<()> {
        let expected = warp_reference(&map, w, h, flow);
        let got: Vec<f64> = warp(&tensor(map, &[h, w]), flow)?.flatten_all()?.to_vec1()?;
        for (a, b) in got.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
        Ok(())
    };
    for case in 0..200 {
        let (w, h) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let map: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let flow = if case % 4 == 0 {
            let (u, v) = (rng.random_range(-4..=4) as f32, rng.random_range(-4..=4) as f32);
            FlowField::constant(w, h, u, v)
        } else {
            FlowField::from_fn(w, h, |_, _| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
        };
        compare(map, w, h, &flow)?;
    }
    let (w, h) = (6, 5);
    let map: Vec<f64> = (0..w * h).map(|i| i as f64).collect();
    let mut shifts = 0;
    for u in -(w as i32)..=w as i32 {
        for v in -(h as i32)..=h as i32 {
            let flow = FlowField::constant(w, h, u as f32, v as f32);
            let expected: Vec<f64> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y as i32 + v, x as i32 + u)))
                .map(|(sy, sx)| map[sy.clamp(0, h as i32 - 1) as usize * w + sx.clamp(0, w as i32 - 1) as usize])
                .collect();
            let got: Vec<f64> = warp(&tensor(map.clone(), &[h, w]), &flow)?.flatten_all()?.to_vec1()?;
            ensure!(got == expected, "integer shift ({u}, {v}) is not an exact clamped copy");
            shifts += 1;
        }
    }
    ensure!(worst <= 1e-6, "warp differs from the sampling oracle by {worst:e}");
    Ok(format!("max deviation {worst:.1e} on 200 random cases; {shifts} integer shifts exact"))
}

fn tiny_model(dtype: DType, seed: u64) -> ExpertModel {
    let cfg = ModelConfig {
        input_size: 32,
        seed,
        ..ModelConfig::tiny(3)
    };
    ExpertModel::build(&cfg, dtype, &Device::Cpu).unwrap()
}

fn random_batch(model: &ExpertModel, domains: &[Domain], rng: &mut ChaCha8Rng) -> TrainBatch {
    let n = domains.len();
    let s = model.config().input_size;
    let cam = model.config().cam_size();
    let pixels: Vec<f64> = (0..3 * n * 3 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut flow = || FlowField::from_fn(cam, cam, |_, _| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]);
    let flows = (0..n)
        .map(|_| FlowPair {
            past: flow(),
            future: flow(),
        })
        .collect();
    TrainBatch {
        ids: (0..n).map(|i| format!("s{i}")).collect(),
        images: tensor(pixels, &[3 * n, 3, s, s]).to_dtype(model.dtype()).unwrap(),
        classes: (0..n).map(|_| rng.random_range(0..model.num_classes())).collect(),
        domains: domains.to_vec(),
        flows,
    }
}

fn photometric_properties() -> Result<String> {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut asym: f64 = 0.0;
    let mut self_loss: f64 = 0.0;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let mut map = || tensor((0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect(), &[h, w]);
        let (a, b) = (map(), map());
        self_loss = self_loss.max(scalar(&photometric_loss(&a, &a, &cfg)?).abs());
        let ab = scalar(&photometric_loss(&a, &b, &cfg)?);
        let ba = scalar(&photometric_loss(&b, &a, &cfg)?);
        asym = asym.max((ab - ba).abs());
    }
    ensure!(self_loss <= 1e-12, "L_ph(a, a) reaches {self_loss:e}");
    ensure!(asym <= 1e-9, "L_ph asymmetry {asym:e}");
    let constant = scalar(&photometric_loss(&tensor(vec![0.0; 16], &[4, 4]), &tensor(vec![1.0; 16], &[4, 4]), &cfg)?);
    ensure!((constant - 0.574958).abs() <= 1e-5, "constant-map value {constant}");

    // Central differences of L_fc with respect to every classifier weight and
    // log-scale; the features are fixed, so L_fc depends on those alone.
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let model = tiny_model(DType::F64, instance);
        let batch = random_batch(&model, &[Domain::Day, Domain::Night], &mut rng);
        let head = model.head(ExpertId::ALL[instance as usize % 3]);
        let features = head.forward(&model.backbone_features(&batch.images)?.detach())?.features;
        let frame_classes: Vec<usize> = batch.classes.iter().flat_map(|&y| [y; 3]).collect();
        let flows: Vec<&FlowPair> = batch.flows.iter().collect();
        let fc = || -> Result<Tensor> {
            let cams = head.class_activation_maps(&features, &frame_classes)?;
            let (_, h, w) = cams.dims3()?;
            Ok(flow_consistency_loss_batch(&cams.reshape((2, 3, h, w))?, &flows, &cfg)?.mean(0)?)
        };
        let grads = fc()?.backward()?;
        for var in [head.weight(), head.log_scale()] {
            let analytic: Vec<f64> = grads.get(var.as_tensor()).context("no gradient")?.flatten_all()?.to_vec1()?;
            let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
            let dims = var.dims().to_vec();
            let eps = 1e-5;
            for (k, &g) in analytic.iter().enumerate() {
                let at = |delta: f64| -> Result<f64> {
                    let mut p = base.clone();
                    p[k] += delta;
                    var.set(&tensor(p, &dims))?;
                    Ok(scalar(&fc()?))
                };
                let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
                let rel = (numeric - g).abs() / numeric.abs().max(g.abs()).max(1e-5);
                worst = worst.max(rel);
            }
            var.set(&tensor(base, &dims))?;
        }
    }
    ensure!(worst <= 1e-4, "L_fc gradient relative error {worst:e}");
    Ok(format!(
        "max L_ph(a,a) {self_loss:.1e}, asymmetry {asym:.1e}, constant maps {constant:.6}; L_fc gradient rel. error {worst:.1e} on 20 instances"
    ))
}

fn max_abs_grad(model: &ExpertModel, grads: &GradStore, group: ParamGroup) -> f64 {
    model
        .group_params(group)
        .iter()
        .filter_map(|(_, v)| grads.get(v.as_tensor()))
        .map(|g| scalar(&g.abs().unwrap().max_all().unwrap()))
        .fold(0.0, f64::max)
}

fn snapshot(model: &ExpertModel, group: ParamGroup) -> Vec<Vec<u32>> {
    model
        .group_params(group)
        .iter()
        .map(|(_, v)| {
            let vals: Vec<f32> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            vals.into_iter().map(f32::to_bits).collect()
        })
        .collect()
}

fn gradient_routing() -> Result<String> {
    use Domain::*;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = tiny_model(DType::F64, 4);
    let batch = random_batch(&model, &[Day, Night, Night, Day, Night], &mut rng);
    let cfg = TrainConfig::default();
    let losses = expert_losses(&model, &batch, &cfg)?;
    let (day, night) = (losses.day.context("no day loss")?, losses.night.context("no night loss")?);

    let grads = (&day.total + &night.total)?.backward()?;
    let backbone = max_abs_grad(&model, &grads, ParamGroup::Backbone);
    let full = max_abs_grad(&model, &grads, ParamGroup::Expert(ExpertId::Full));
    ensure!(backbone == 0.0 && full == 0.0, "sub-domain losses reach backbone ({backbone:e}) or full head ({full:e})");
    let cross = [
        (day.total.backward()?, ExpertId::Night),
        (night.total.backward()?, ExpertId::Day),
    ];
    for (g, other) in &cross {
        let leak = max_abs_grad(&model, g, ParamGroup::Expert(*other));
        ensure!(leak == 0.0, "{other:?} head receives {leak:e} from the other sub-domain loss");
    }

    for (e, l) in [(ExpertId::Full, &losses.full), (ExpertId::Day, &day), (ExpertId::Night, &night)] {
        let fc = l.fc.as_ref().context("flow-consistency term missing")?;
        let g = fc.backward()?;
        let backbone = max_abs_grad(&model, &g, ParamGroup::Backbone);
        let block = model
            .group_params(ParamGroup::Expert(e))
            .iter()
            .filter(|(name, _)| name.contains(".block."))
            .filter_map(|(_, v)| g.get(v.as_tensor()))
            .map(|t| scalar(&t.abs().unwrap().max_all().unwrap()))
            .fold(0.0, f64::max);
        ensure!(backbone == 0.0 && block == 0.0, "L_fc of {e:?} reaches backbone ({backbone:e}) or block ({block:e})");
        ensure!(g.get(model.head(e).weight().as_tensor()).is_some(), "L_fc of {e:?} misses the classifier");
    }

    let model = tiny_model(DType::F32, 5);
    let batch = random_batch(&model, &[Day, Night, Day], &mut rng);
    let frozen = [
        ParamGroup::Backbone,
        ParamGroup::Expert(ExpertId::Full),
    ]
    .map(|g| snapshot(&model, g));
    let before_day = snapshot(&model, ParamGroup::Expert(ExpertId::Day));
    let losses = expert_losses(&model, &batch, &cfg)?;
    let sub = (&losses.day.context("no day loss")?.total + &losses.night.context("no night loss")?.total)?;
    let grads = sub.backward()?;
    let mut opt = Sgd::new(0.9, 0.0);
    opt.step(&model.group_params(ParamGroup::Backbone), &grads, 0.1)?;
    for e in ExpertId::ALL {
        opt.step(&model.group_params(ParamGroup::Expert(e)), &grads, 0.1)?;
    }
    let after = [
        ParamGroup::Backbone,
        ParamGroup::Expert(ExpertId::Full),
    ]
    .map(|g| snapshot(&model, g));
    ensure!(after == frozen, "backbone or full head changed after a sub-domain-only step");
    ensure!(snapshot(&model, ParamGroup::Expert(ExpertId::Day)) != before_day, "day head did not move");
    Ok("sub-domain and L_fc gradients are exactly zero where required; backbone bitwise unchanged".into())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn inference_algebra() -> Result<String> {
    ensure!(scale_sub_logits(&[1.0, -1.0], 4.0, 16.0)? == [0.5, -0.5]);
    ensure!(scale_sub_logits(&[0.25, 3.0], 9.0, 9.0)? == [0.25, 3.0]);
    ensure!(scale_sub_logits(&[0.0, 0.0], 2.0, 5.0)? == [0.0, 0.0]);
    ensure!(scale_sub_logits(&[1.0], 1.0, 0.0).is_err(), "zero full-expert norm accepted");
    ensure!(fuse(&[2.0, 0.0], &[0.0, 1.0]) == [1.0, 0.5]);
    ensure!(fuse(&[0.3, -1.0], &[0.3, -1.0]) == [0.3, -1.0]);
    ensure!(argmax(&[1.0, 0.5]) == 0 && argmax(&[0.7, 0.7]) == 0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let c = rng.random_range(2..=20);
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-20.0..20.0)).collect();
        let p = softmax(&x);
        let by_prob = (0..c).fold(0, |best, i| if p[i] > p[best] { i } else { best });
        ensure!(argmax(&x) == by_prob, "argmax differs from argmax of softmax on {x:?}");
    }

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let (a, b) = (rng.random_range(0.01..10.0), rng.random_range(0.01..10.0));
        let lambda: f64 = rng.random_range(0.05..20.0);
        let base = scale_sub_logits(&x, a, b)?;
        let scaled = scale_sub_logits(&x, lambda * lambda * a, lambda * lambda * b)?;
        for (u, v) in base.iter().zip(&scaled) {
            worst = worst.max((u - v).abs());
        }
    }
    let model = tiny_model(DType::F64, 6);
    let ratio = |m: &ExpertModel| -> Result<f64> {
        Ok(m.head(ExpertId::Night).classifier_weight_sqnorm()? / m.head(ExpertId::Full).classifier_weight_sqnorm()?)
    };
    let before = ratio(&model)?;
    for e in [ExpertId::Full, ExpertId::Night] {
        let w = model.head(e).weight();
        w.set(&(w.as_tensor() * 3.7)?)?;
    }
    let drift = (ratio(&model)? - before).abs();
    ensure!(worst <= 1e-9 && drift <= 1e-9, "rescaling changes the scaled logits by {worst:e} / ratio by {drift:e}");
    Ok(format!(
        "worked fusions exact; argmax agrees on 10^4 vectors; common rescale drift {:.1e}",
        worst.max(drift)
    ))
}

struct Toy {
    manifest: DatasetManifest,
    records: Vec<PredictionRecord>,
}

fn toy(rng: &mut ChaCha8Rng, balanced_test: bool) -> Toy {
    let classes = rng.random_range(1..=6);
    let mut samples = Vec::new();
    let mut push = |class: usize, domain: Domain, split: Split| {
        let id = format!("c{class}_{}_{}", domain.as_str(), samples.len());
        samples.push(SequenceSample {
            frames: [0, 1, 2].map(|k| format!("{id}_{k}.png")),
            id,
            class_label: class,
            domain,
            location: "loc0".into(),
            split,
        });
    };
    let budget = 60 / classes;
    for c in 0..classes {
        let (day, night) = loop {
            let day = rng.random_range(1..=(budget - 2) / 2);
            let night = rng.random_range(1..=(budget - 2) / 2);
            if !balanced_test || day != night {
                break (day, night);
            }
        };
        for _ in 0..day {
            push(c, Domain::Day, Split::Train);
        }
        for _ in 0..night {
            push(c, Domain::Night, Split::Train);
        }
        let room = budget - day - night;
        if balanced_test {
            let k = rng.random_range(1..=room / 2);
            for _ in 0..k {
                push(c, Domain::Day, Split::Test);
                push(c, Domain::Night, Split::Test);
            }
        } else {
            for _ in 0..rng.random_range(1..=room) {
                push(c, if rng.random_bool(0.5) { Domain::Day } else { Domain::Night }, Split::Test);
            }
        }
    }
    let records = samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(|s| PredictionRecord {
            sequence_id: s.id.clone(),
            frame: 0,
            domain: s.domain,
            y_true: s.class_label,
            y_pred: if rng.random_bool(0.6) { s.class_label } else { rng.random_range(0..classes) },
            fused_logits: vec![0.0; classes],
        })
        .collect();
    let manifest = DatasetManifest {
        classes: (0..classes).map(|c| format!("class{c}")).collect(),
        samples,
    };
    Toy { manifest, records }
}

/// Cell counts by direct enumeration: one pass per cell over the test samples.
fn enumerate_cells(t: &Toy) -> BTreeMap<&'static str, (usize, usize)> {
    let train = |c: usize, d: Domain| {
        t.manifest
            .samples
            .iter()
            .filter(|s| s.split == Split::Train && s.class_label == c && s.domain == d)
            .count()
    };
    let by_id: BTreeMap<&str, &SequenceSample> = t.manifest.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let rows: Vec<(usize, Domain, bool)> = t
        .records
        .iter()
        .map(|r| {
            let s = by_id[r.sequence_id.as_str()];
            (s.class_label, s.domain, r.y_pred == s.class_label)
        })
        .collect();
    let total = |c: usize| train(c, Domain::Day) + train(c, Domain::Night);
    let major = |c: usize, d: Domain| train(c, d) >= train(c, d.other());
    let imbalanced = |c: usize| {
        let (a, b) = (train(c, Domain::Day), train(c, Domain::Night));
        a.max(b) >= 3 * a.min(b)
    };
    let count = |pred: &dyn Fn(usize, Domain) -> bool| {
        let hits: Vec<bool> = rows.iter().filter(|(c, d, _)| pred(*c, *d)).map(|r| r.2).collect();
        (hits.iter().filter(|&&ok| ok).count(), hits.len())
    };
    let mut out = BTreeMap::new();
    out.insert("Many", count(&|c, _| total(c) > 100));
    out.insert("Medium", count(&|c, _| (20..=100).contains(&total(c))));
    out.insert("Few", count(&|c, _| total(c) < 20));
    out.insert("MJ-Bal", count(&|c, d| major(c, d) && !imbalanced(c)));
    out.insert("MJ-Imbal", count(&|c, d| major(c, d) && imbalanced(c)));
    out.insert("MJ-Total", count(&|c, d| major(c, d)));
    out.insert("MN-Bal", count(&|c, d| !major(c, d) && !imbalanced(c)));
    out.insert("MN-Imbal", count(&|c, d| !major(c, d) && imbalanced(c)));
    out.insert("MN-Total", count(&|c, d| !major(c, d)));
    out.insert("All", count(&|_, _| true));
    out
}

fn pct(cell: &Cell) -> f64 {
    cell.accuracy.unwrap_or(f64::NAN)
}

fn metrics_oracle() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..50 {
        let t = toy(&mut rng, false);
        let report = evaluate(&t.records, &t.manifest)?;
        let oracle = enumerate_cells(&t);
        for (name, cell) in report.columns() {
            let (correct, total) = oracle[name];
            let acc = (total > 0).then(|| 100.0 * correct as f64 / total as f64);
            ensure!(
                (cell.correct, cell.total) == (correct, total) && cell.accuracy == acc,
                "toy {i}, cell {name}: {}/{} vs oracle {correct}/{total}",
                cell.correct,
                cell.total
            );
        }
    }
    let mut identities = 0;
    for _ in 0..50 {
        let t = toy(&mut rng, true);
        let r = evaluate(&t.records, &t.manifest)?;
        let gap = (pct(&r.all) - (pct(&r.major.total) + pct(&r.minor.total)) / 2.0).abs();
        ensure!(gap <= 1e-9, "All differs from (MJ + MN) / 2 by {gap:e} on a domain-balanced test set");
        identities += 1;
    }
    let set = imbalanced_classes(&DomainCounts(vec![[30, 10], [29, 10], [10, 30], [5, 5]]))?;
    ensure!(set.into_iter().collect::<Vec<_>>() == [0, 2], "ratio-3 boundary misclassified");
    Ok(format!("50 toys match enumeration; balanced identity on {identities} toys; ratio 3 is imbalanced, 2.9 is not"))
}

fn run(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_camtrap")).args(args).output()?;
    if !out.status.success() {
        bail!("camtrap {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn pipeline_once(dir: &Path, config: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let d = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let cfg = config.to_string_lossy().into_owned();
    run(&["gen", "--config", &cfg, "--seed", "7", "--out", &d("data")])?;
    run(&["train", "--config", &cfg, "--seed", "7", "--manifest", &d("data/manifest.json"), "--out", &d("run")])?;
    run(&[
        "eval",
        "--config",
        &cfg,
        "--manifest",
        &d("data/manifest.json"),
        "--checkpoint",
        &d("run/final.safetensors"),
        "--out",
        &d("eval"),
    ])?;
    ["data/manifest.json", "run/final.safetensors", "eval/report.json", "eval/report.txt", "eval/predictions.jsonl"]
        .iter()
        .map(|p| Ok((p.to_string(), std::fs::read(dir.join(p)).with_context(|| format!("reading {p}"))?)))
        .collect()
}

const TINY_CONFIG: &str = r#"{
  "synth": { "head_count": 24, "tail_count": 8 },
  "model": { "stem_channels": 8, "stage_channels": [16, 16, 32, 32], "head_channels": 32, "norm_groups": 4 },
  "train": { "epochs": 3 }
}"#;

fn pipeline_determinism() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let config = tmp.path().join("tiny.json");
    std::fs::write(&config, TINY_CONFIG)?;
    let a = pipeline_once(&tmp.path().join("a"), &config)?;
    let b = pipeline_once(&tmp.path().join("b"), &config)?;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        ensure!(x == y, "{name} differs between runs");
    }
    Ok(format!("{} artefacts byte-identical across two runs", a.len()))
}

fn minor_accuracy(manifest: &DatasetManifest, root: &Path, model: &ExpertModel) -> Result<f64> {
    let records = predict_split(model, manifest, root, Split::Test, false, 0)?;
    evaluate(&records, manifest)?.minor.total.accuracy.context("no minor test samples")
}

fn synthetic_trend() -> Result<String> {
    let tmp = tempfile::tempdir()?;
    let mut lines = Vec::new();
    let (mut base_sum, mut full_sum) = (0.0, 0.0);
    for seed in 1..=3u64 {
        let root = tmp.path().join(format!("seed{seed}"));
        let spec = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let manifest = generate_dataset(&spec, &root)?;
        let manifest = filter_categories(split_train_test(manifest, 0.6, seed)?)?;
        let (manifest, _) = balance_test_domains(manifest, seed)?;
        let strong = manifest.counts().0.iter().filter(|[d, n]| d.max(n) >= &(5 * d.min(n))).count();
        ensure!(manifest.num_classes() == 6 && strong >= 3, "dataset shape: {} classes, {strong} with ratio >= 5", manifest.num_classes());
        let model = ModelConfig {
            num_classes: 6,
            ..ModelConfig::tiny(6)
        };
        let mut acc = [0.0; 2];
        for (slot, full) in [false, true].into_iter().enumerate() {
            let train = TrainConfig {
                epochs: 30,
                domain_experts: full,
                flow_consistency: full,
                seed,
                ..TrainConfig::default()
            };
            let out = fit(&manifest, &root, &model, &train, &root.join(format!("run{slot}")))?;
            acc[slot] = minor_accuracy(&manifest, &root, &out.model)?;
        }
        lines.push(format!("seed {seed}: baseline {:.1} / full {:.1}", acc[0], acc[1]));
        base_sum += acc[0];
        full_sum += acc[1];
    }
    let gain = (full_sum - base_sum) / 3.0;
    let detail = format!("minor accuracy gain {gain:+.2} pp ({})", lines.join("; "));
    ensure!(gain > -1.0, "{detail}");
    Ok(detail)
}

fn lr_scaling() -> Result<String> {
    let t = scaled_lr(0.01, &DomainCounts(vec![[100, 300], [200, 400]]))?;
    ensure!((t.day - 0.003).abs() <= 1e-12 && (t.night - 0.007).abs() <= 1e-12, "got {} / {}", t.day, t.night);
    ensure!(t.full == 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let counts = DomainCounts(
            (0..rng.random_range(1..=10))
                .map(|_| [rng.random_range(0..500), rng.random_range(1..500)])
                .collect(),
        );
        let lr = rng.random_range(1e-4..1.0);
        let t = scaled_lr(lr, &counts)?;
        worst = worst.max((t.day + t.night - lr).abs());
    }
    ensure!(worst <= 1e-12, "day + night differs from full by {worst:e}");
    Ok(format!("0.003 / 0.007 example exact; max |day + night - full| {worst:.1e} over 1000 tables"))
}
