mod common;

use common::{random_tensor, rng};
use mambar_core::block::{BlockConfig, Direction, MambaBlock};
use mambar_core::params::ParamStore;
use mambar_core::ssm::ScanBackend;
use mambar_core::{Graph, Tensor};
use rand::Rng;

fn build(tie: bool, seed: u64) -> (ParamStore<f64>, MambaBlock) {
    let mut cfg = BlockConfig::new(8, 4);
    cfg.tie_directions = tie;
    let mut store = ParamStore::new();
    let block = MambaBlock::new(&mut store, "block0", cfg, &mut rng(seed)).unwrap();
    (store, block)
}

fn run(store: &ParamStore<f64>, block: &MambaBlock, x: &Tensor<f64>, dir: Option<Direction>) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars = store.to_graph(&mut g, false);
    let xv = g.constant(x.clone());
    let y = match dir {
        Some(d) => block.forward_direction(&mut g, &vars, xv, d).unwrap(),
        None => block.forward(&mut g, &vars, xv).unwrap(),
    };
    g.value(y).clone()
}

fn reversed(t: &Tensor<f64>) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..t.shape()[0]).rev().map(|i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_token_has_no_direction() {
    let (store, block) = build(true, 1);
    let x = random_tensor(&mut rng(2), &[1, 8], 1.0);
    assert_eq!(
        run(&store, &block, &x, Some(Direction::Forward)),
        run(&store, &block, &x, Some(Direction::Backward))
    );
}

#[test]
fn zero_output_projection_passes_input_through() {
    let (mut store, block) = build(false, 3);
    *store.get_mut(block.out_proj) = Tensor::zeros(&[16, 8]);
    let x = random_tensor(&mut rng(4), &[5, 8], 1.0);
    assert_eq!(run(&store, &block, &x, None), x);
}

#[test]
fn zero_input_with_zero_biases_is_a_fixed_point() {
    let (mut store, block) = build(false, 5);
    for dir in [block.fwd, block.bwd] {
        *store.get_mut(dir.conv_bias) = Tensor::zeros(&[16]);
    }
    let x = Tensor::zeros(&[6, 8]);
    assert_eq!(run(&store, &block, &x, None), x);
}

#[test]
fn tied_backward_direction_is_reversed_forward() {
    let (store, block) = build(true, 6);
    let x = random_tensor(&mut rng(7), &[9, 8], 1.0);
    let bwd = run(&store, &block, &x, Some(Direction::Backward));
    let via_fwd = reversed(&run(&store, &block, &reversed(&x), Some(Direction::Forward)));
    assert_eq!(bwd, via_fwd);
}

#[test]
fn tied_block_is_reversal_equivariant() {
    let (store, block) = build(true, 8);
    let x = random_tensor(&mut rng(9), &[11, 8], 1.0);
    let a = reversed(&run(&store, &block, &x, None));
    let b = run(&store, &block, &reversed(&x), None);
    assert!(max_abs_diff(&a, &b) <= 1e-12);
}

#[test]
fn tied_block_preserves_palindromes() {
    let (store, block) = build(true, 10);
    let half = random_tensor(&mut rng(11), &[4, 8], 1.0);
    let rows: Vec<Vec<f64>> = (0..4).chain((0..4).rev()).map(|i| half.row(i).to_vec()).collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let y = run(&store, &block, &x, None);
    assert!(max_abs_diff(&y, &reversed(&y)) <= 1e-12);
}

#[test]
fn swapping_two_tokens_changes_the_output() {
    let (store, block) = build(false, 12);
    let mut r = rng(13);
    let x = random_tensor(&mut r, &[8, 8], 1.0);
    let y = run(&store, &block, &x, None);
    for _ in 0..5 {
        let i = r.gen_range(0..8);
        let j = (i + r.gen_range(1..8)) % 8;
        let mut rows: Vec<Vec<f64>> = (0..8).map(|k| x.row(k).to_vec()).collect();
        rows.swap(i, j);
        let mut ys = run(&store, &block, &Tensor::from_rows(&rows).unwrap(), None);
        // Undo the permutation on the output; a permutation-equivariant map
        // would now match exactly.
        let mut out: Vec<Vec<f64>> = (0..8).map(|k| ys.row(k).to_vec()).collect();
        out.swap(i, j);
        ys = Tensor::from_rows(&out).unwrap();
        assert!(max_abs_diff(&y, &ys) > 1e-6);
    }
}

#[test]
fn backends_agree_on_block_output() {
    let (store, block) = build(false, 14);
    let mut par = block.clone();
    par.cfg.backend = ScanBackend::Parallel;
    let x = random_tensor(&mut rng(15), &[13, 8], 1.0);
    assert!(max_abs_diff(&run(&store, &block, &x, None), &run(&store, &par, &x, None)) <= 1e-11);
}

#[test]
fn block_gradients_match_finite_differences() {
    let (store, block) = build(false, 16);
    let mut r = rng(17);
    let x = random_tensor(&mut r, &[6, 8], 1.0);
    let w = random_tensor(&mut r, &[6, 8], 1.0);
    let loss = |params: &[Tensor<f64>], x: &Tensor<f64>, grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<_> = params.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let xv = g.leaf(x.clone(), grad);
        let y = block.forward(&mut g, &vars, xv).unwrap();
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        let l = g.sum(p);
        let mut grads = Vec::new();
        if grad {
            g.backward(l).unwrap();
            grads = vars.iter().chain([&xv]).map(|&v| g.grad(v).unwrap().to_vec()).collect();
        }
        (g.value(l).data()[0], grads)
    };
    let (_, analytic) = loss(store.tensors(), &x, true);
    let mut all: Vec<Tensor<f64>> = store.tensors().to_vec();
    all.push(x.clone());
    let numeric = common::finite_differences(&mut all, 1e-5, |ts| {
        let (params, x) = ts.split_at(ts.len() - 1);
        loss(params, &x[0], false).0
    });
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_owned()).chain(["input".into()]).collect();
    for ((name, a), n) in names.iter().zip(&analytic).zip(&numeric) {
        let err = common::norm_relative(a, n);
        assert!(err <= 1e-3, "{name}: {err:e}");
    }
}
