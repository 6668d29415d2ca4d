use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use handprob::autodiff::Array;
use handprob::hand_prior::{lbs_forward, synthetic::paddle_hand};
use handprob::harness::model::build_train_graph;
use handprob::harness::{generate_synthetic, model::init_params, project_mesh, RunConfig};
use handprob::rasterizer::rasterize;

fn bench_lbs(c: &mut Criterion) {
    let t = paddle_hand();
    let mut pose = Array::zeros(&[t.joint_count, 3]);
    for (i, x) in pose.data_mut().iter_mut().enumerate().skip(3) {
        *x = 0.1 * ((i as f64) * 0.7).sin();
    }
    let shape = vec![0.2; t.shape_count()];
    c.bench_function("lbs_forward_162v", |b| {
        b.iter(|| lbs_forward(&t, black_box(&shape), black_box(&pose)).unwrap())
    });
}

fn bench_rasterize(c: &mut Criterion) {
    let t = paddle_hand();
    let cfg = RunConfig::default();
    let s = generate_synthetic(&cfg, &t, 1, 3).unwrap().remove(0);
    let pm = project_mesh(&t, &s.target.vertices, &s.camera(), 64);
    c.bench_function("rasterize_64x64", |b| {
        b.iter(|| rasterize(black_box(&pm), 64, 64))
    });
}

fn bench_train_pass(c: &mut Criterion) {
    let t = paddle_hand();
    let cfg = RunConfig::default();
    let s = generate_synthetic(&cfg, &t, 1, 3).unwrap().remove(0);
    let params = init_params(&cfg, &t);
    let tg = build_train_graph(&cfg, &t).unwrap();
    let image = s.image_chw();
    let cam = Array::new(vec![1, 7], s.target.camera.to_vec()).unwrap();
    let mut bind = params.bindings();
    bind.insert("image", &image);
    bind.insert("gt_vertices", &s.target.vertices);
    bind.insert("gt_joints3d", &s.target.joints3d);
    bind.insert("gt_joints2d", &s.target.joints2d);
    bind.insert("gt_camera", &cam);
    c.bench_function("supervised_forward", |b| {
        b.iter(|| {
            tg.graph
                .forward(black_box(&bind))
                .unwrap()
                .get(tg.total)
                .item()
        })
    });
    c.bench_function("supervised_forward_backward", |b| {
        b.iter(|| {
            let v = tg.graph.forward(&bind).unwrap();
            tg.graph.backward(&v, tg.total).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_lbs, bench_rasterize, bench_train_pass
}
criterion_main!(benches);
