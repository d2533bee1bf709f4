use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use loadpatch_bench::{day, params, variants};
use loadpatch_core::codec::{decode_series, encode_series};
use loadpatch_core::metrics::{egye, mpe, rmse};
use loadpatch_core::preprocess::{dequantize, quantize_value};
use loadpatch_core::promptset::{build_training_sample, render_completion};
use loadpatch_core::restorer::restore_and_score;
use loadpatch_core::Reading;

fn codec(c: &mut Criterion) {
    let day: Vec<Reading> = (0..96).map(|i| Reading::Value((i * 2) as u8)).collect();
    let text = encode_series(&day).unwrap();
    c.bench_function("encode_series/96", |b| b.iter(|| encode_series(black_box(&day))));
    c.bench_function("decode_series/96", |b| b.iter(|| decode_series(black_box(&text))));
}

fn quantize(c: &mut Criterion) {
    let p = params();
    let xs: Vec<f64> = (0..96).map(|i| 210.0 + i as f64 * 16.0).collect();
    c.bench_function("quantize+dequantize/96", |b| {
        b.iter(|| {
            xs.iter()
                .map(|&x| dequantize(quantize_value(x, p.load_min, p.load_max), &p).unwrap())
                .sum::<f64>()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let t: Vec<f64> = (0..16).map(|i| 800.0 + i as f64 * 10.0).collect();
    let r: Vec<f64> = (0..16).map(|i| 790.0 + i as f64 * 11.0).collect();
    c.bench_function("metrics/16", |b| {
        b.iter(|| {
            (
                mpe(black_box(&t), black_box(&r)).unwrap(),
                rmse(&t, &r).unwrap(),
                egye(&t, &r).unwrap(),
            )
        })
    });
}

fn prompts_and_restore(c: &mut Criterion) {
    let p = params();
    let d = day(40);
    for v in variants() {
        let name = if v.separate_load_temp { "separate_ternary" } else { "combined_integer" };
        c.bench_function(&format!("training_sample/{name}"), |b| {
            b.iter(|| build_training_sample(black_box(&d), v))
        });
        let completion = render_completion(&d, v).unwrap();
        c.bench_function(&format!("restore/{name}"), |b| {
            b.iter(|| restore_and_score(black_box(&completion), &d, v, &p))
        });
    }
}

criterion_group!(benches, codec, quantize, metrics, prompts_and_restore);
criterion_main!(benches);
