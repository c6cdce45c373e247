use criterion::{black_box, criterion_group, criterion_main, Criterion};

use simic::dataio::{generate_synthetic, SynthSpec};
use simic::model::{images_to_tensor, AttentionKind, Backbone, ModelConfig, SimicModel};
use simic::{Tape, Tensor};

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[32, 16, 32, 32]);
    let w = ramp(&[32, 16, 3, 3]);
    c.bench_function("conv2d 32x16x32x32 -> 32ch", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            black_box(tape.conv2d(xv, wv, None, 2, 1).unwrap());
        })
    });
    c.bench_function("conv2d forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv2d(xv, wv, None, 2, 1).unwrap();
            let l = tape.sum(y);
            tape.backward(l).unwrap();
            black_box(tape.grad(wv));
        })
    });
}

fn train_step(c: &mut Criterion) {
    let data = generate_synthetic(&SynthSpec::default(), 32).unwrap();
    let images: Vec<_> = data.iter().map(|s| &s.image).collect();
    let x = images_to_tensor(&images).unwrap();
    let mut group = c.benchmark_group("forward+backward 32x64x64");
    group.sample_size(10);
    for (name, backbone, attention) in [
        ("resnet", Backbone::Residual, AttentionKind::None),
        ("resnet+mha", Backbone::Residual, AttentionKind::MultiHead),
        ("mobile+additive", Backbone::Depthwise, AttentionKind::Additive),
    ] {
        let model = SimicModel::build(&ModelConfig { backbone, attention, ..ModelConfig::default() }).unwrap();
        let target = Tensor::zeros(&[32, 3]);
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape, true);
                let out = model.forward(&mut tape, &vars, &x, None, true).unwrap();
                let t = tape.constant(target.clone());
                let loss = tape.huber(out.predictions, t, 1.0, false).unwrap();
                tape.backward(loss).unwrap();
                black_box(tape.grad(vars[0]));
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, train_step);
criterion_main!(benches);
