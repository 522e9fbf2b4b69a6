use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use soc_verify_core::registry::registry;
use soc_verify_core::{
    build_cone, find_multipliers, goh_matrices, linearize, necessity_scan, sufficiency_check, vertex_forms,
    SufficiencyMode,
};

const N: usize = 200;

fn bench_pipeline(c: &mut Criterion) {
    let (p, tr) = registry("pe", Some(1.0), N).unwrap();
    let set = find_multipliers(&p, &tr, 1e-10).unwrap();
    let lin = linearize(&p, &tr).unwrap();
    let forms = vertex_forms(&p, &tr, &lin, &set, 1e-8).unwrap();
    let cone = build_cone(&p, &tr, &lin, 1e-6).unwrap();

    c.bench_function("multipliers_pe_200", |b| b.iter(|| find_multipliers(black_box(&p), &tr, 1e-10).unwrap()));
    c.bench_function("goh_matrices_pe_200", |b| {
        b.iter(|| goh_matrices(black_box(&p), &tr, &set.vertices[0]).unwrap())
    });
    c.bench_function("build_cone_pe_200", |b| b.iter(|| build_cone(black_box(&p), &tr, &lin, 1e-6).unwrap()));
    c.bench_function("sufficiency_pe_200", |b| {
        b.iter(|| sufficiency_check(black_box(&cone), &forms, true, SufficiencyMode::Subspace, 0, 0).unwrap())
    });
    c.bench_function("necessity_pe_200_x1000", |b| {
        b.iter(|| necessity_scan(black_box(&cone), &forms, true, 1000, 0, 1e-8).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_pipeline
}
criterion_main!(benches);
