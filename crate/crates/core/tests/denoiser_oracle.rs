//! Tiny U-Net inference against a straight-line reimplementation.

use ndarray::Array2;
use oatk::denoiser::{infer_noise, DenoiserArch, DenoiserModel};
use oatk::{seeded_rng, RngSeed, Sinogram};

type Map = Vec<Vec<Vec<f64>>>;

struct Tensors<'a> {
    model: &'a DenoiserModel,
    buffers: Vec<(String, Vec<f64>)>,
}

impl Tensors<'_> {
    fn w(&self, name: &str) -> Vec<f64> {
        self.model.tensor(name).unwrap_or_else(|| panic!("{name}")).iter().map(|&v| v as f64).collect()
    }

    fn b(&self, name: &str) -> Vec<f64> {
        self.buffers.iter().find(|(n, _)| n == name).unwrap().1.clone()
    }
}

fn conv3(x: &Map, w: &[f64], cout: usize) -> Map {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let mut y = vec![vec![vec![0.0; wd]; h]; cout];
    for co in 0..cout {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let rr = r as i64 + ky as i64 - 1;
                            let cc = c as i64 + kx as i64 - 1;
                            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= wd as i64 {
                                continue;
                            }
                            acc += w[((co * cin + ci) * 3 + ky) * 3 + kx] * x[ci][rr as usize][cc as usize];
                        }
                    }
                }
                y[co][r][c] = acc;
            }
        }
    }
    y
}

fn norm_relu(x: &mut Map, g: &[f64], b: &[f64], mean: &[f64], var: &[f64]) {
    for (ch, plane) in x.iter_mut().enumerate() {
        for v in plane.iter_mut().flatten() {
            let n = g[ch] * (*v - mean[ch]) / (var[ch] + 1e-5).sqrt() + b[ch];
            *v = n.max(0.0);
        }
    }
}

fn unit(t: &Tensors, name: &str, x: &Map, cout: usize) -> Map {
    let mut y = conv3(x, &t.w(&format!("{name}.conv.weight")), cout);
    norm_relu(
        &mut y,
        &t.w(&format!("{name}.norm.gamma")),
        &t.w(&format!("{name}.norm.beta")),
        &t.b(&format!("{name}.norm.running_mean")),
        &t.b(&format!("{name}.norm.running_var")),
    );
    y
}

fn pool(x: &Map) -> Map {
    x.iter()
        .map(|p| {
            (0..p.len() / 2)
                .map(|r| {
                    (0..p[0].len() / 2)
                        .map(|c| {
                            p[2 * r][2 * c].max(p[2 * r][2 * c + 1]).max(p[2 * r + 1][2 * c]).max(p[2 * r + 1][2 * c + 1])
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn up(x: &Map, w: &[f64], bias: &[f64]) -> Map {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let cout = bias.len();
    let mut y = vec![vec![vec![0.0; 2 * wd]; 2 * h]; cout];
    for co in 0..cout {
        for r in 0..2 * h {
            for c in 0..2 * wd {
                let mut acc = bias[co];
                for ci in 0..cin {
                    acc += w[((ci * cout + co) * 2 + r % 2) * 2 + c % 2] * x[ci][r / 2][c / 2];
                }
                y[co][r][c] = acc;
            }
        }
    }
    y
}

#[test]
fn tiny_model_matches_straight_line_forward() {
    let arch = DenoiserArch { levels: 1, base_channels: 2 };
    let mut rng = seeded_rng(RngSeed(0), "oracle");
    let mut m = DenoiserModel::init(arch, 0.004, &mut rng).unwrap();
    for (i, v) in m.weights.iter_mut().enumerate() {
        *v = (0.5 * (0.37 * i as f64 + 0.1).sin()) as f32;
    }
    let n_buf = m.buffers.len();
    let net = m.unet().unwrap();
    for spec in &net.buffers.tensors {
        for (k, i) in spec.range().enumerate() {
            m.buffers[i] = if spec.name.ends_with("running_var") {
                (1.0 + 0.5 * (k as f64).cos().powi(2)) as f32
            } else {
                (0.05 * (i as f64).sin()) as f32
            };
        }
    }
    assert_eq!(n_buf, net.buffers.len);
    let buffers = net
        .buffers
        .tensors
        .iter()
        .map(|t| (t.name.clone(), m.buffers[t.range()].iter().map(|&v| v as f64).collect()))
        .collect();
    let t = Tensors { model: &m, buffers };

    let input = Array2::from_shape_fn((16, 32), |(r, c)| {
        250.0 * (0.3 * r as f64 + 0.17 * c as f64).sin() + 30.0 * (0.05 * (r * c) as f64).cos()
    });
    let s = Sinogram::new(input.clone(), 40e6).unwrap();
    let got = infer_noise(&m, &s).unwrap();

    // straight-line evaluation in f64 from the same f32 weights
    let x: Map = vec![(0..16).map(|r| (0..32).map(|c| (input[[r, c]] * 0.004) as f32 as f64).collect()).collect()];
    let e0 = unit(&t, "enc0.1", &unit(&t, "enc0.0", &x, 2), 2);
    let bott = unit(&t, "bottleneck.1", &unit(&t, "bottleneck.0", &pool(&e0), 4), 4);
    let u = up(&bott, &t.w("up0.weight"), &t.w("up0.bias"));
    let cat: Map = e0.iter().chain(u.iter()).cloned().collect();
    let d0 = unit(&t, "dec0.1", &unit(&t, "dec0.0", &cat, 2), 2);
    let hw = t.w("head.weight");
    let hb = t.w("head.bias")[0];

    let mut peak: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for r in 0..16 {
        for c in 0..32 {
            let expect = (hw[0] * d0[0][r][c] + hw[1] * d0[1][r][c] + hb) / 0.004;
            peak = peak.max(expect.abs());
            worst = worst.max((got.data()[[r, c]] - expect).abs());
        }
    }
    assert!(peak > 1.0, "degenerate oracle output");
    assert!(worst <= 2e-5 * peak, "max deviation {worst} against peak {peak}");
}
