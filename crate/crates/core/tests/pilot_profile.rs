use bapm_core::augment::{sample_pretext, AugmentConfig};
use bapm_core::model::{Model, ModelConfig, PretextTasks};
use bapm_core::phantom::{generate_phantom, PhantomSpec};
use bapm_core::tensor::Tape;
use bapm_core::train::{one_hot, pretext_loss};

#[test]
fn profile_parts() {
    let sample = generate_phantom(&PhantomSpec::default(), 1).unwrap();
    let aug = AugmentConfig::default();

    let t0 = std::time::Instant::now();
    for i in 0..8 {
        let _ = sample_pretext(&sample.intensity, Some(&sample.labels), &aug, i).unwrap();
    }
    println!("augment per-sample {:?}", t0.elapsed() / 8);

    let model = Model::init_pretext(ModelConfig::default(), PretextTasks::Both, 1).unwrap();
    let spatial = 32 * 32 * 32;
    let input: Vec<f32> = sample.intensity.as_f32().unwrap().repeat(4);
    let onehot = one_hot(&[sample.labels.as_u8().unwrap(); 4].map(|x| x), spatial);
    let rec_target = input.clone();

    // forward only
    let t1 = std::time::Instant::now();
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let x = tape.leaf(input.clone(), &[4, 1, 32, 32, 32], false).unwrap();
    let (rec, seg) = model.pretext_forward(&mut tape, &b, x, PretextTasks::Both).unwrap();
    println!("forward (batch 4) {:?}", t1.elapsed());

    let t2 = std::time::Instant::now();
    let loss = pretext_loss(&mut tape, rec, Some(&rec_target), seg, Some(&onehot), PretextTasks::Both).unwrap();
    tape.backward(loss.loss).unwrap();
    println!("backward {:?}", t2.elapsed());

    // bind cost
    let t3 = std::time::Instant::now();
    for _ in 0..5 {
        let mut t = Tape::new();
        let _ = model.bind(&mut t);
    }
    println!("bind {:?}", t3.elapsed() / 5);
}
