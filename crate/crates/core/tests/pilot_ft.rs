use bapm_core::augment::AugmentConfig;
use bapm_core::model::{ModelConfig, PretextTasks};
use bapm_core::phantom::{generate_dataset, PhantomSpec};
use bapm_core::train::{finetune, pretrain, RunConfig, Sample};

#[test]
fn pilot_finetune_speed() {
    let phantoms = generate_dataset(10, &PhantomSpec::default(), 5).unwrap();
    let samples: Vec<Sample> = phantoms.into_iter().map(Into::into).collect();
    let run = RunConfig { pretext_epochs: 2, seed: 7, ..Default::default() };
    let pre = pretrain(&samples, &run, ModelConfig::default(), &AugmentConfig::default()).unwrap();
    let enc = bapm_core::train::ablation::encoder_tensors(&pre.model);

    // frozen finetune
    let ft_run = RunConfig { finetune_epochs: 2, seed: 3, ..Default::default() };
    let t0 = std::time::Instant::now();
    let out = finetune(&samples, Some(&enc), &ft_run, ModelConfig::default(), &AugmentConfig::default()).unwrap();
    let steps = out.trace.len();
    println!("frozen: {} steps, per-step {:?}", steps, t0.elapsed() / steps as u32);

    // scratch finetune
    let t1 = std::time::Instant::now();
    let out2 = finetune(&samples, None, &ft_run, ModelConfig::default(), &AugmentConfig::default()).unwrap();
    println!("scratch: per-step {:?}", t1.elapsed() / out2.trace.len() as u32);
    let first = out2.trace[..5].iter().map(|r| r.l_ce.unwrap()).sum::<f64>() / 5.0;
    let last = out2.trace[out2.trace.len()-5..].iter().map(|r| r.l_ce.unwrap()).sum::<f64>() / 5.0;
    println!("scratch ce first {first:.4} last {last:.4}");
    let _ = PretextTasks::Both;
}
