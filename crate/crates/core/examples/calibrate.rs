//! Scratch calibration run for desk-scale settings (not part of the test
//! suite). Compares signed and raw-gradient noise ascent and mask budgets.

use std::time::Instant;

use noisegate::attack::{
    asr, benign_accuracy, poison_dataset, train_backdoor, LabelMap, PoisonSpec, TriggerSpec,
};
use noisegate::data::make_synthetic_dataset;
use noisegate::decouple::{
    default_lambda_grid, feature_loss_diagnostics, masked_noised_predict, optimize_mask,
    select_lambda1, MaskConfig,
};
use noisegate::detect::{concentration_all_to_one, DetectionSettings};
use noisegate::model::{argmax_rows, build_model, train, ActKind, ArchDescriptor, TrainHyper};
use noisegate::noise::{pgd_maximize, PgdConfig, UpdateRule};
use noisegate::rng::child_seed;

fn main() {
    let root = 20250809u64;
    let data = make_synthetic_dataset(10, 400, 16, child_seed(root, "dataset")).unwrap();
    // Larger detection subset for calibration: 4% of train.
    let subsets = data.defender_subsets(0.04, 0.05, child_seed(root, "subsets")).unwrap();
    let opt = data.batch(&subsets.detect).unwrap();
    let score = data.batch(&subsets.scoring).unwrap();
    let test = data.test_batch().unwrap();
    let train_set = data.train_batch().unwrap();
    println!("data: opt={} score={} test={}", opt.len(), score.len(), test.len());

    let hyper = TrainHyper {
        epochs: 30,
        batch_size: 32,
        learning_rate: 0.01,
        momentum: 0.9,
        weight_decay: 5e-4,
        lr_milestones: vec![20, 26],
        lr_gamma: 0.1,
        seed: 0,
    };

    let arch = ArchDescriptor::Cnn {
        channels: vec![32, 64],
        kernel: 3,
        activation: ActKind::LeakyRelu,
        batch_norm: true,
    };

    let mut models = Vec::new();
    for (mname, poison) in [
        ("clean0", None),
        ("clean1", None),
        (
            "badnets",
            Some(PoisonSpec {
                trigger: TriggerSpec::default_patch(),
                label_map: LabelMap::AllToOne { target: 0 },
                rate: 0.05,
                seed: child_seed(root, "p1"),
            }),
        ),
        (
            "blend",
            Some(PoisonSpec {
                trigger: TriggerSpec::default_blend(child_seed(root, "bp")),
                label_map: LabelMap::AllToOne { target: 0 },
                rate: 0.05,
                seed: child_seed(root, "p2"),
            }),
        ),
    ] {
        let t = Instant::now();
        let seed = child_seed(root, mname);
        let mut model = build_model(&arch, data.image_shape, 10, seed).unwrap();
        let h = TrainHyper { seed, ..hyper.clone() };
        match &poison {
            Some(spec) => {
                let p = poison_dataset(&train_set, spec, 10).unwrap();
                train_backdoor(&mut model, &p, &h).unwrap();
                let ba = benign_accuracy(&model, &test).unwrap();
                let a = asr(&model, &test, spec).unwrap();
                println!("{mname}: ba={ba:.3} asr={a:.3} ({:.1?})", t.elapsed());
            }
            None => {
                train(&mut model, &train_set, &h).unwrap();
                let ba = benign_accuracy(&model, &test).unwrap();
                println!("{mname}: ba={ba:.3} ({:.1?})", t.elapsed());
            }
        }
        models.push((mname, model));
    }

    let settings = DetectionSettings::new(0.3, child_seed(root, "detect"));
    // Masks first: shared across noise variants.
    let mcfg = MaskConfig { batch_size: 16, ..settings.mask_config() };
    let masks: Vec<_> = models
        .iter()
        .map(|(mname, model)| {
            let t = Instant::now();
            let mask = optimize_mask(model, &opt, &mcfg).unwrap();
            let diag = feature_loss_diagnostics(model, &mask, &opt).unwrap();
            println!(
                "mask {mname}: frac={:.3} pos={:.3} neg={:.3} ({:.1?})",
                diag.l1_fraction, diag.pos_loss, diag.neg_loss, t.elapsed()
            );
            mask
        })
        .collect();

    for update in [UpdateRule::Signed, UpdateRule::RawGradient] {
        println!("-- update rule {:?}", update);
        for ((mname, model), mask) in models.iter().zip(&masks) {
            let pcfg = PgdConfig { update, ..settings.pgd_config() };
            let outcome = pgd_maximize(model, &opt, &pcfg).unwrap();
            let logits = masked_noised_predict(model, &outcome.noise, mask, &score.inputs).unwrap();
            let preds = argmax_rows(&logits);
            let (conc, tgt) = concentration_all_to_one(&preds, &score.labels, 10).unwrap();
            // Accuracy of the noised (unmasked) model on scoring data.
            let noised = model
                .with_neuron_noise(&outcome.noise.selection, &outcome.noise.delta, &outcome.noise.xi)
                .unwrap();
            let noised_preds = argmax_rows(&noised.forward(&score.inputs).unwrap());
            let noised_acc = noised_preds
                .iter()
                .zip(&score.labels)
                .filter(|(p, l)| p == l)
                .count() as f32
                / score.len() as f32;
            println!(
                "  {mname:8} start={:.3} final={:.3} gain={:.3} linf={:.2} noised_acc={:.3} conc={conc:.3} tgt={tgt}",
                outcome.start_loss,
                outcome.final_loss,
                outcome.gain(),
                outcome.noise.linf(),
                noised_acc,
            );
        }
    }

    // Lambda sweep on badnets with the bigger budget.
    let (_, bd_model) = &models[2];
    let t = Instant::now();
    let sweep = select_lambda1(bd_model, &opt, &default_lambda_grid(), &mcfg).unwrap();
    println!("sweep ({:.1?}) -> lambda1={:.2} collapsed={}", t.elapsed(), sweep.lambda1, sweep.collapsed);
    for r in &sweep.rows {
        println!(
            "  l1={:.1} norm={:8.1} frac={:.3} pos={:.3} neg={:.3}",
            r.lambda1, r.l1_norm, r.l1_fraction, r.pos_loss, r.neg_loss
        );
    }
}
