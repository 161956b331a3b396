use anosynth::kernels::{self, ConvGeom};
use anosynth::rng;
use std::time::Instant;

fn time_it(name: &str, iters: usize, mut f: impl FnMut()) {
    let t = Instant::now();
    for _ in 0..iters {
        f();
    }
    eprintln!("{name}: {:.3} ms/iter", t.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}

#[test]
#[ignore]
fn primitives() {
    let mut r = rng::stream(0, "micro", 0);
    // L1 conv: 48 -> 48 at 16x16
    let g = ConvGeom { c_in: 48, h_in: 16, w_in: 16, c_out: 48, ksize: 3, stride: 1, pad: 1 };
    let x = rng::normal_vec(&mut r, 48 * 256, 1.0);
    let w = rng::normal_vec(&mut r, 48 * 432, 0.1);
    time_it("im2col 48x16x16", 2000, || {
        let c = kernels::im2col(&x, &g);
        std::hint::black_box(&c);
    });
    let cols = kernels::im2col(&x, &g);
    time_it("conv matmul 48x432x256", 2000, || {
        let mut out = vec![0.0; 48 * 256];
        kernels::matmul_nn(&w, &cols, &mut out, 48, 432, 256);
        std::hint::black_box(&out);
    });
    // SCM encoder first conv: 4 -> 16 at 64x64
    let g2 = ConvGeom { c_in: 4, h_in: 64, w_in: 64, c_out: 16, ksize: 3, stride: 1, pad: 1 };
    let x2 = rng::normal_vec(&mut r, 4 * 4096, 1.0);
    let w2 = rng::normal_vec(&mut r, 16 * 36, 0.1);
    time_it("im2col 4x64x64", 1000, || {
        let c = kernels::im2col(&x2, &g2);
        std::hint::black_box(&c);
    });
    let cols2 = kernels::im2col(&x2, &g2);
    time_it("conv matmul 16x36x4096", 1000, || {
        let mut out = vec![0.0; 16 * 4096];
        kernels::matmul_nn(&w2, &cols2, &mut out, 16, 36, 4096);
        std::hint::black_box(&out);
    });
    time_it("col2im 4x64x64", 1000, || {
        let c = kernels::col2im(&cols2, &g2);
        std::hint::black_box(&c);
    });
    // attention-ish matmuls
    let q = rng::normal_vec(&mut r, 256 * 16, 1.0);
    let k = rng::normal_vec(&mut r, 320 * 16, 1.0);
    time_it("scores nt 256x16x320", 4000, || {
        let mut out = vec![0.0; 256 * 320];
        kernels::matmul_nt(&q, &k, &mut out, 256, 16, 320);
        std::hint::black_box(&out);
    });
    // linear nt 256x64 @ 64x64
    let a = rng::normal_vec(&mut r, 256 * 64, 1.0);
    let wl = rng::normal_vec(&mut r, 64 * 64, 0.1);
    time_it("linear nt 256x64x64", 4000, || {
        let mut out = vec![0.0; 256 * 64];
        kernels::matmul_nt(&a, &wl, &mut out, 256, 64, 64);
        std::hint::black_box(&out);
    });
    // gelu pass over 48x16x16
    let v = rng::normal_vec(&mut r, 48 * 256, 1.0);
    time_it("gelu map 12k", 4000, || {
        let out: Vec<f64> = v.iter().map(|&x| anosynth::fastmath::gelu(x)).collect();
        std::hint::black_box(&out);
    });
    // groupnorm-style two-pass over 12k
    time_it("norm stats 12k", 4000, || {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        std::hint::black_box((mean, var));
    });
    // tensor clone 12k
    time_it("clone 12k", 8000, || {
        let c = v.clone();
        std::hint::black_box(&c);
    });
    // zero alloc 110k (the L1 cols buffer)
    time_it("alloc zeroed 110k", 4000, || {
        let c = vec![0.0f64; 110592];
        std::hint::black_box(&c);
    });
}
