// Finite-difference checks for every differentiable graph op, shared by the
// core gradient tests and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrc_core::gradcheck::{weighted_sum, GradCheck, GradReport};
use rrc_core::{Graph, Real, Result, Tensor, Var};

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn probe(out_shape: Vec<usize>, rng: &mut ChaCha8Rng, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Build {
    let w = rand_t(&out_shape, rng);
    Box::new(move |g, v| {
        let y = f(g, v)?;
        assert_eq!(g.shape(y), w.shape(), "probe weights sized for the op output");
        weighted_sum(g, y, &w)
    })
}

/// Runs every op on three randomized shapes; returns `(op, report)` rows.
pub fn run_op_suite(seed: u64) -> Vec<(String, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let check = GradCheck::default();
    let mut rows = Vec::new();
    for trial in 0..3 {
        let n = 1 + trial % 2;
        let c = 1 + rng.random_range(1..4usize);
        let h = 4 + rng.random_range(0..4usize);
        let w = 4 + rng.random_range(0..4usize);
        let co = 1 + rng.random_range(0..3usize);
        let (stride, pad, k) = [(1, 1, 3), (2, 1, 3), (1, 0, 1)][trial];
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;

        let mut cases: Vec<(&str, Vec<Tensor>, Build)> = Vec::new();
        cases.push((
            "conv2d",
            vec![rand_t(&[n, c, h, w], &mut rng), rand_t(&[co, c, k, k], &mut rng), rand_t(&[co], &mut rng)],
            probe(vec![n, co, oh, ow], &mut rng, move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
        ));
        let (ds, dp, dk) = [(2, 0, 2), (2, 1, 3), (1, 0, 2)][trial];
        let dh = (h - 1) * ds + dk - 2 * dp;
        let dw = (w - 1) * ds + dk - 2 * dp;
        cases.push((
            "deconv2d",
            vec![rand_t(&[n, c, h, w], &mut rng), rand_t(&[c, co, dk, dk], &mut rng)],
            probe(vec![n, co, dh, dw], &mut rng, move |g, v| g.deconv2d(v[0], v[1], ds, dp)),
        ));
        cases.push((
            "maxpool2d",
            vec![rand_t(&[n, c, h, w], &mut rng)],
            probe(vec![n, c, h / 2, w / 2], &mut rng, |g, v| g.maxpool2d(v[0], 2, 2)),
        ));
        cases.push((
            "relu",
            vec![rand_t(&[n, c, h, w], &mut rng)],
            probe(vec![n, c, h, w], &mut rng, |g, v| Ok(g.relu(v[0]))),
        ));
        cases.push((
            "concat_channels",
            vec![rand_t(&[n, c, h, w], &mut rng), rand_t(&[n, co, h, w], &mut rng)],
            probe(vec![n, c + co, h, w], &mut rng, |g, v| g.concat_channels(v)),
        ));
        cases.push((
            "slice_channels",
            vec![rand_t(&[n, c + 1, h, w], &mut rng)],
            probe(vec![n, c, h, w], &mut rng, move |g, v| g.slice_channels(v[0], 1, c)),
        ));
        let (fh, fw) = (h + 1 - 2 * (trial % 2), w - 1 + 2 * (trial % 2));
        cases.push((
            "fit_spatial",
            vec![rand_t(&[n, c, h, w], &mut rng)],
            probe(vec![n, c, fh, fw], &mut rng, move |g, v| g.fit_spatial(v[0], fh, fw)),
        ));
        cases.push((
            "softmax_rows",
            vec![rand_t(&[h, c + 1], &mut rng)],
            probe(vec![h, c + 1], &mut rng, |g, v| Ok(g.softmax_rows(v[0]))),
        ));
        cases.push((
            "add",
            vec![rand_t(&[n, c, h], &mut rng), rand_t(&[n, c, h], &mut rng)],
            probe(vec![n, c, h], &mut rng, |g, v| g.add(v[0], v[1])),
        ));
        cases.push((
            "mul",
            vec![rand_t(&[n, c, h], &mut rng), rand_t(&[n, c, h], &mut rng)],
            probe(vec![n, c, h], &mut rng, |g, v| g.mul(v[0], v[1])),
        ));
        let s: Real = rng.random_range(-2.0..2.0);
        cases.push((
            "scale",
            vec![rand_t(&[c, w], &mut rng)],
            probe(vec![c, w], &mut rng, move |g, v| Ok(g.scale(v[0], s))),
        ));
        cases.push((
            "sum",
            vec![rand_t(&[c, h, w], &mut rng)],
            probe(vec![1], &mut rng, |g, v| Ok(g.sum(v[0]))),
        ));
        let len = c * h * w;
        let index: Vec<usize> = (0..2 * h).map(|_| rng.random_range(0..len)).collect();
        let gather_len = index.len();
        cases.push((
            "gather",
            vec![rand_t(&[c, h, w], &mut rng)],
            probe(vec![gather_len], &mut rng, move |g, v| g.gather(v[0], index.clone(), &[gather_len])),
        ));
        let classes = c + 1;
        let targets: Vec<usize> = (0..h).map(|_| rng.random_range(0..classes)).collect();
        cases.push((
            "cross_entropy_sum",
            vec![rand_t(&[h, classes], &mut rng)],
            probe(vec![1], &mut rng, move |g, v| g.cross_entropy_sum(v[0], targets.clone())),
        ));
        // Targets spread to exercise both smooth-L1 branches.
        let target: Vec<Real> = (0..h * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        cases.push((
            "smooth_l1_sum",
            vec![rand_t(&[h, 4], &mut rng)],
            probe(vec![1], &mut rng, move |g, v| g.smooth_l1_sum(v[0], target.clone())),
        ));

        for (name, inputs, build) in cases {
            let report = check.inputs(&inputs, build).expect("gradient check runs");
            rows.push((format!("{name}#{trial}"), report));
        }
    }
    rows
}
