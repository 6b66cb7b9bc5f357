use bapm_core::augment::AugmentConfig;
use bapm_core::metrics::ReconConfig;
use bapm_core::model::{ModelConfig, PretextTasks};
use bapm_core::phantom::{generate_dataset, PhantomSpec};
use bapm_core::train::{eval_pretext, pretrain, RunConfig, Sample};

#[test]
fn pilot_trajectory() {
    let spec = PhantomSpec::default();
    let train: Vec<Sample> = generate_dataset(100, &spec, 1001).unwrap().into_iter().map(Into::into).collect();
    let holdout: Vec<Sample> = generate_dataset(10, &spec, 2002).unwrap().into_iter().map(Into::into).collect();
    for epochs in [10usize, 14] {
        let run = RunConfig { pretext_epochs: epochs, seed: 42, ..Default::default() };
        let out = pretrain(&train, &run, ModelConfig::default(), &AugmentConfig::default()).unwrap();
        let ev = eval_pretext(&out.model, PretextTasks::Both, &holdout, &ReconConfig::default()).unwrap();
        println!("ep{epochs}: soft {:.4} hard {:.4} ssim {:.4} mae {:.4} nmi {:.4}", ev.soft_dice, ev.hard_dice, ev.ssim, ev.mae, ev.nmi);
    }
}
