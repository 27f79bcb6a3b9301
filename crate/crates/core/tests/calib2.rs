//! Candidate-seed detail: ablations + plugin at the settled regimes.

use unlab_core::data::*;
use unlab_core::eval::*;
use unlab_core::nn::*;
use unlab_core::optim::OptimizerKind;
use unlab_core::unlearn::*;

#[test]
#[ignore]
fn candidates() {
    let input = 16usize;
    let widths = vec![10usize, 14, 20, 28];
    let d_proj = 4usize;
    let blob = BlobSpec { classes: 20, dim: input, n_per_class: 50, sigma: 0.5, mean_scale: 2.5 };
    let pre = TrainSchedule { epochs: 80, lr: 0.05, batch: 64, optimizer: OptimizerKind::sgd(0.9) };
    let pc = ProbeConfig::default();
    for seed in [2u64, 13, 29, 48, 8, 21] {
        let dims = ModelDims { input_dim: input, stage_widths: widths.clone(), classes: 20, d_proj, split_final: false };
        let (train, test) = gen_blobs(&blob, seed).unwrap();
        let split = select_forget_classes(&train, SelectStrategy::Random { k: 2, seed }).unwrap();
        let splits = split_by_classes(&train, &test, &split).unwrap();
        let (orig, _) = train_original(&dims, &train, &pre, seed).unwrap();
        let (retr, _) = retrain_oracle(&dims, &splits.retain_train, &pre, seed).unwrap();
        let mut pretrained = attach_ec_modules(orig.clone(), d_proj, seed).unwrap();
        supcon_pretrain(&mut pretrained, &train, 40, 1e-2, 128, 0.1, seed).unwrap();
        let mut cfg = UnlearnConfig::desk_default(4);
        cfg.lr = 2.5e-3;
        cfg.epochs = 400;
        let mut ec = pretrained.clone();
        ec_unlearn(&mut ec, &splits.forget_train, &splits.retain_train, &cfg, seed, |_, _| {}).unwrap();
        let idi_of = |b: &ModelBundle| idi_probe(&orig, b, &retr, &splits.forget_train, &splits.forget_test, &pc);
        let cka_of = |b: &ModelBundle| 100.0 * layerwise_cka(b, &orig, &splits.forget_test, &[3]).unwrap()[0];
        let ec_cka = cka_of(&ec);
        let ec_idi = idi_of(&ec);

        let mut noce_cfg = cfg.clone();
        noce_cfg.variant = Variant::NoLayerwiseCe;
        let mut noce = pretrained.clone();
        ec_unlearn(&mut noce, &splits.forget_train, &splits.retain_train, &noce_cfg, seed, |_, _| {}).unwrap();
        let mut nomod_cfg = cfg.clone();
        nomod_cfg.variant = Variant::NoEcModules;
        let mut nomod = orig.clone();
        let nomod_res = ec_unlearn(&mut nomod, &splits.forget_train, &splits.retain_train, &nomod_cfg, seed, |_, _| {});
        let nomod_idi = nomod_res.as_ref().ok().map(|_| idi_of(&nomod));

        let mut ga_cfg = cfg.clone();
        ga_cfg.lr = 2e-4;
        ga_cfg.epochs = 150;
        let mut ga = orig.clone();
        gradient_ascent_baseline(&mut ga, &splits.forget_train, &splits.retain_train, &ga_cfg, seed).unwrap();
        let mut plug_cfg = ga_cfg.clone();
        plug_cfg.lambda_ce = 0.3;
        let mut plug = pretrained.clone();
        let base = GradientAscentObjective;
        let obj = plugin_augment(&base, &plug_cfg);
        objective_unlearn(&mut plug, &splits.forget_train, &splits.retain_train, &obj, &plug_cfg, seed, |_, _| {}).unwrap();
        let mut scrambled = build_backbone(&dims, seed ^ 0xdead_beef).unwrap();
        for t in scrambled.params_mut() {
            for v in t.data_mut() {
                *v *= 3.0;
            }
        }
        let scr_idi = idi_of(&scrambled);
        println!("  scrambled idi {scr_idi:?}");
        println!(
            "seed {seed}: ec cka {ec_cka:.1} idi {ec_idi:?} | noce cka {:.1} | nomod {} idi {:?} | ga {:.1} plugin {:.1}",
            cka_of(&noce),
            if nomod_res.is_ok() { "ok" } else { "DIED" },
            nomod_idi,
            cka_of(&ga),
            cka_of(&plug),
        );
    }
}
