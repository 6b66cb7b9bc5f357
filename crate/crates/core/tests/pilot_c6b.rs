use bapm_core::augment::AugmentConfig;
use bapm_core::metrics::ReconConfig;
use bapm_core::model::{ModelConfig, PretextTasks};
use bapm_core::phantom::{generate_dataset, PhantomSpec};
use bapm_core::train::{eval_pretext, pretrain, RunConfig, Sample};

fn desk_aug() -> AugmentConfig {
    let mut a = AugmentConfig::default();
    a.translation_vox = 2.0;
    a.blur_sigma_range = (0.0, 0.8);
    a.motion_translation_vox = 1.5;
    a
}

fn run_once(name: &str, train: &[Sample], holdout: &[Sample], augment: bool, aug: &AugmentConfig, epochs: usize) {
    let run = RunConfig { pretext_epochs: epochs, augment, seed: 42, ..Default::default() };
    let t0 = std::time::Instant::now();
    let out = pretrain(train, &run, ModelConfig::default(), aug).unwrap();
    let ev = eval_pretext(&out.model, PretextTasks::Both, holdout, &ReconConfig::default()).unwrap();
    println!("{name}: soft_dice {:.4} ssim {:.4} hard_dice {:.4} ({:?})", ev.soft_dice, ev.ssim, ev.hard_dice, t0.elapsed());
}

#[test]
fn pilot_variants() {
    let spec = PhantomSpec::default();
    let train: Vec<Sample> = generate_dataset(100, &spec, 1001).unwrap().into_iter().map(Into::into).collect();
    let holdout: Vec<Sample> = generate_dataset(10, &spec, 2002).unwrap().into_iter().map(Into::into).collect();
    run_once("aug-off-10ep", &train, &holdout, false, &AugmentConfig::default(), 10);
    run_once("aug-desk-10ep", &train, &holdout, true, &desk_aug(), 10);
    run_once("aug-off-30ep", &train, &holdout, false, &AugmentConfig::default(), 30);
}
