//! Gradient-check cases for every differentiable tape op. Each returns the
//! worst relative error between autodiff and central differences.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinylab::kernels::RopeTable;
use tinylab::{Mode, Tensor};

use super::{gradcheck, project_to_scalar, random_tensor};

type Eval<'a> = Mode<'a, ChaCha8Rng>;

pub type Case = fn() -> f64;

/// Every op case with its name, for suites that run them all.
pub const ALL: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("embedding_lookup", embedding_lookup),
    ("add_bias_relu_reshape", add_bias_relu_reshape),
    ("layer_norm", layer_norm),
    ("softmax_rows", softmax_rows),
    ("cross_entropy", cross_entropy),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("causal_attention", causal_attention),
    (
        "causal_attention_with_weight_dropout",
        causal_attention_with_weight_dropout,
    ),
    ("self_attention_shared_input", self_attention_shared_input),
    ("rope_rotate", rope_rotate),
    ("head_split_merge_and_gather", head_split_merge_and_gather),
    ("last_query_attention", last_query_attention),
    ("rope_with_offset", rope_with_offset),
    ("sum", sum),
];

pub fn matmul() -> f64 {
    let inputs = [random_tensor(&[3, 4], 1), random_tensor(&[4, 2], 2)];
    gradcheck(&inputs, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project_to_scalar(t, y, 3)
    })
}

pub fn embedding_lookup() -> f64 {
    let inputs = [random_tensor(&[5, 3], 4)];
    gradcheck(&inputs, |t, v| {
        let y = t.embedding(v[0], &[1, 4, 1, 0]).unwrap();
        project_to_scalar(t, y, 5)
    })
}

pub fn add_bias_relu_reshape() -> f64 {
    // Keep pre-activations away from the ReLU kink.
    let x: Vec<f64> = random_tensor(&[4, 3], 6)
        .data()
        .iter()
        .map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v })
        .collect();
    let inputs = [
        Tensor::new(&[4, 3], x).unwrap(),
        Tensor::new(&[3], vec![0.01, -0.02, 0.015]).unwrap(),
        random_tensor(&[4, 3], 7),
    ];
    gradcheck(&inputs, |t, v| {
        let y = t.add_bias(v[0], v[1]).unwrap();
        let y = t.relu(y);
        let y = t.add(y, v[2]).unwrap();
        let y = t.reshape(y, &[12]).unwrap();
        project_to_scalar(t, y, 8)
    })
}

pub fn layer_norm() -> f64 {
    let inputs = [
        random_tensor(&[4, 8], 9),
        random_tensor(&[8], 10),
        random_tensor(&[8], 11),
    ];
    gradcheck(&inputs, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        project_to_scalar(t, y, 12)
    })
}

pub fn softmax_rows() -> f64 {
    let inputs = [random_tensor(&[3, 5], 13)];
    gradcheck(&inputs, |t, v| {
        let y = t.softmax_rows(v[0]);
        project_to_scalar(t, y, 14)
    })
}

pub fn cross_entropy() -> f64 {
    let inputs = [random_tensor(&[8, 10], 15)];
    gradcheck(&inputs, |t, v| {
        t.cross_entropy(v[0], &[0, 3, 9, 2, 2, 7, 5, 1]).unwrap()
    })
}

pub fn dropout_with_fixed_mask() -> f64 {
    let inputs = [random_tensor(&[6, 4], 16)];
    gradcheck(&inputs, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = t.dropout(v[0], 0.3, &mut Mode::Train(&mut rng)).unwrap();
        project_to_scalar(t, y, 17)
    })
}

pub fn causal_attention() -> f64 {
    let inputs = [
        random_tensor(&[2, 4, 3], 18),
        random_tensor(&[2, 4, 3], 19),
        random_tensor(&[2, 4, 3], 20),
    ];
    gradcheck(&inputs, |t, v| {
        let y = t
            .causal_attention(v[0], v[1], v[2], 1.0 / 3f64.sqrt(), 0.0, &mut Eval::Eval)
            .unwrap();
        project_to_scalar(t, y, 21)
    })
}

pub fn causal_attention_with_weight_dropout() -> f64 {
    let inputs = [
        random_tensor(&[2, 4, 2], 22),
        random_tensor(&[2, 4, 2], 23),
        random_tensor(&[2, 4, 2], 24),
    ];
    gradcheck(&inputs, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = t
            .causal_attention(v[0], v[1], v[2], 0.5, 0.25, &mut Mode::Train(&mut rng))
            .unwrap();
        project_to_scalar(t, y, 25)
    })
}

pub fn self_attention_shared_input() -> f64 {
    // q, k and v all the same node exercises the aliased backward path.
    let inputs = [random_tensor(&[1, 3, 2], 26)];
    gradcheck(&inputs, |t, v| {
        let y = t
            .causal_attention(v[0], v[0], v[0], 0.7, 0.0, &mut Eval::Eval)
            .unwrap();
        project_to_scalar(t, y, 27)
    })
}

pub fn rope_rotate() -> f64 {
    let table = Arc::new(RopeTable::new(5, 4, 10000.0));
    let inputs = [random_tensor(&[2, 5, 4], 28)];
    gradcheck(&inputs, |t, v| {
        let y = t.rope(v[0], table.clone()).unwrap();
        project_to_scalar(t, y, 29)
    })
}

pub fn head_split_merge_and_gather() -> f64 {
    let inputs = [random_tensor(&[6, 4], 30)];
    gradcheck(&inputs, |t, v| {
        let s = t.split_heads(v[0], 2, 3, 2).unwrap();
        let m = t.merge_heads(s, 2, 2).unwrap();
        let g = t.gather_rows(m, &[2, 5, 2]).unwrap();
        project_to_scalar(t, g, 31)
    })
}

pub fn last_query_attention() -> f64 {
    // Two queries against four keys: the queries sit at positions 2 and 3.
    let inputs = [
        random_tensor(&[2, 2, 3], 32),
        random_tensor(&[2, 4, 3], 33),
        random_tensor(&[2, 4, 3], 34),
    ];
    gradcheck(&inputs, |t, v| {
        let y = t
            .causal_attention(v[0], v[1], v[2], 0.6, 0.0, &mut Eval::Eval)
            .unwrap();
        project_to_scalar(t, y, 35)
    })
}

pub fn rope_with_offset() -> f64 {
    let table = Arc::new(RopeTable::new(6, 4, 10000.0));
    let inputs = [random_tensor(&[2, 2, 4], 36)];
    gradcheck(&inputs, |t, v| {
        let y = t.rope_at(v[0], table.clone(), 4).unwrap();
        project_to_scalar(t, y, 37)
    })
}

pub fn sum() -> f64 {
    let inputs = [random_tensor(&[3, 3], 38)];
    gradcheck(&inputs, |t, v| {
        let y = t.embedding(v[0], &[2, 0]).unwrap();
        let y = t.softmax_rows(y);
        let y = t.reshape(y, &[1, 6]).unwrap();
        let y = t.cross_entropy(y, &[4]).unwrap();
        t.sum(y)
    })
}
