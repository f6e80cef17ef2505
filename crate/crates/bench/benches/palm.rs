use criterion::{criterion_group, criterion_main, Criterion};
use mtplab::palm::{palm_ensemble_exact, palm_inversion_check};
use mtplab::{Builtin, MeasureRef};
use mtplab_bench::bernoulli_cycle;

fn palm(c: &mut Criterion) {
    let phi = MeasureRef::parse("phi");
    for n in [6, 8, 10] {
        let e = bernoulli_cycle(n, 0.5);
        c.bench_function(&format!("palm_exact/cycle{n}"), |b| {
            b.iter(|| palm_ensemble_exact(&e, &phi, &Builtin::BalancedH).unwrap())
        });
        c.bench_function(&format!("palm_inversion/cycle{n}"), |b| {
            b.iter(|| palm_inversion_check(&e, "phi", &Builtin::BalancedH).unwrap())
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = palm
}
criterion_main!(benches);
