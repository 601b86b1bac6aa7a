//! Autodiff gradients against central finite differences, in f64.

mod common;

use common::ops;

const TOL: f64 = 1e-4;

macro_rules! gradchecks {
    ($($name:ident),* $(,)?) => {$(
        #[test]
        fn $name() {
            let err = ops::$name();
            assert!(err < TOL, "{}: relative error {err:e} >= {TOL:e}", stringify!($name));
        }
    )*};
}

gradchecks!(
    matmul,
    embedding_lookup,
    add_bias_relu_reshape,
    layer_norm,
    softmax_rows,
    cross_entropy,
    dropout_with_fixed_mask,
    causal_attention,
    causal_attention_with_weight_dropout,
    self_attention_shared_input,
    rope_rotate,
    head_split_merge_and_gather,
    last_query_attention,
    rope_with_offset,
    sum,
);
