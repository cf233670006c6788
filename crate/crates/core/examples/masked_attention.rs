//! Masked cross-image attention on a handful of tokens.
//!
//! Run with `cargo run --example masked_attention`.

use restyle::attention::{attention_scores, attention_scores_with, masked_cross_attention, MaskSemantics, TokenTensor};
use restyle::segmatch::AttentionMask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = TokenTensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    let k = TokenTensor::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0])?;
    let v = TokenTensor::new(3, 1, vec![10.0, 20.0, 30.0])?;

    // Query 0 may only look at key 0 and key 2; query 1 sees everything.
    let mask = AttentionMask::from_fn(2, 3, |row, col| row == 1 || col != 1);

    let scores = attention_scores(&q, &k, &mask)?;
    for r in 0..scores.rows {
        println!("query {r} weights {:?}", scores.row(r));
    }
    let out = masked_cross_attention(&q, &k, &v, &mask)?;
    println!("attended values {:?}", out.data);

    let literal = attention_scores_with(&q, &k, &mask, MaskSemantics::Multiplicative)?;
    println!("multiplicative-mask weights for query 0 {:?}", literal.row(0));
    Ok(())
}
