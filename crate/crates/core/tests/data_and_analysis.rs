use rand::Rng;

use selectscale::analysis::cam;
use selectscale::data::{decode_cifar_binary, synthesize_dataset, Normalization, CIFAR_RECORD};
use selectscale::model::{Model, ModelSpec};
use selectscale::rng::{Domain, StreamKey};
use selectscale::tape::GradTape;
use selectscale::Tensor;

#[test]
fn cifar_records_match_scalar_decoder() {
    let mut bytes = Vec::with_capacity(3 * CIFAR_RECORD);
    for r in 0..3usize {
        bytes.push([3u8, 0, 9][r]);
        for i in 0..3072usize {
            bytes.push(((i * 7 + r * 31) % 256) as u8);
        }
    }
    let norm = Normalization {
        mean: [0.4, 0.5, 0.6],
        std: [0.2, 0.25, 0.3],
    };
    let ds = decode_cifar_binary(&bytes, None, 10, Some(norm)).unwrap();
    assert_eq!(ds.len(), 3);
    for r in 0..3 {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        assert_eq!(ds.images[r].label, rec[0] as usize);
        let px = ds.images[r].pixels.data();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let byte = rec[1 + c * 1024 + y * 32 + x];
                    let want = (byte as f64 / 255.0 - norm.mean[c]) / norm.std[c];
                    let got = px[c * 1024 + y * 32 + x] as f64;
                    assert!((got - want).abs() < 1e-5, "record {r} ({c},{y},{x})");
                }
            }
        }
    }
    let limited = decode_cifar_binary(&bytes, Some(2), 10, Some(norm)).unwrap();
    assert_eq!(limited.len(), 2);
}

/// Multinomial logistic regression on raw pixels by full-batch gradient
/// descent; returns training accuracy.
fn linear_probe_accuracy(x: &[Vec<f64>], y: &[usize], k: usize) -> f64 {
    let d = x[0].len();
    let mut w = vec![vec![0.0; d + 1]; k];
    let lr = 0.5;
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; d + 1]; k];
        for (xi, &yi) in x.iter().zip(y) {
            let z: Vec<f64> = w
                .iter()
                .map(|wk| wk[d] + wk[..d].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / s - if c == yi { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[c][j] += g * xi[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= lr * grad[c][j] / x.len() as f64;
            }
        }
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let z: Vec<f64> = w
                .iter()
                .map(|wk| wk[d] + wk[..d].iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let best = (0..k).fold(0, |b, c| if z[c] > z[b] { c } else { b });
            best == yi
        })
        .count();
    correct as f64 / x.len() as f64
}

#[test]
fn synthetic_data_is_linearly_separable() {
    let ds = synthesize_dataset(3, 300, 1, 16).unwrap();
    let x: Vec<Vec<f64>> = ds
        .images
        .iter()
        .map(|im| im.pixels.data().iter().map(|v| *v as f64 / 16.0).collect())
        .collect();
    let y: Vec<usize> = ds.images.iter().map(|im| im.label).collect();
    let acc = linear_probe_accuracy(&x, &y, 3);
    assert!(acc > 0.8, "linear probe train accuracy {acc}");
}

/// Weighted channel sum and min-max normalization by direct loops over the
/// model's pre-pool features.
#[test]
fn cam_matches_double_loop_oracle() {
    let spec = ModelSpec::resnet(8, 1, 4, 8);
    let model = Model::<f32>::build(&spec, 13).unwrap();
    let mut r = StreamKey::new(2, Domain::Scratch).stream();
    let image = Tensor::<f32>::from_fn(&[3, 8, 8], |_| r.gen_range(-1.0..1.0));
    for class in 0..4 {
        let map = cam(&model, &image, class).unwrap();

        let mut tape = GradTape::new();
        let xv = tape.constant(image.clone().reshape(&[1, 3, 8, 8]).unwrap());
        let out = model.forward(&mut tape, xv, false, None).unwrap();
        let f = tape.value(out.features);
        let [_, c, h, w] = f.dims4().unwrap();
        let fc = model
            .params()
            .iter()
            .find(|p| p.name == "fc.weight")
            .unwrap()
            .value
            .clone();
        let mut raw = vec![vec![0.0f64; w]; h];
        for (y, row) in raw.iter_mut().enumerate() {
            for (x, cell) in row.iter_mut().enumerate() {
                for k in 0..c {
                    *cell += fc.data()[class * c + k] as f64 * f.data()[(k * h + y) * w + x] as f64;
                }
            }
        }
        let lo = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        for y in 0..h {
            for x in 0..w {
                let want = (raw[y][x] - lo) / (hi - lo);
                let got = map.values.data()[y * w + x];
                assert!((got - want).abs() < 1e-6, "class {class} ({y},{x})");
            }
        }
        assert_eq!(map.layer, "s3.b0.c2");
    }
}
