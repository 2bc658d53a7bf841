//! Cached decoding against full masked recomputation.

use gist_core::kv_cache::{DecodeSession, Sampler};
use gist_core::mask::build_mask;
use gist_core::model::{forward, ModelConfig, ModelParams, PosEncoding};
use gist_core::vocab::{build_vocab, Scheme};

#[test]
fn greedy_decode_matches_recompute() {
    let text = "a b c d e f g h i j k l m n o p . ! ?";
    for (n_g, pos) in [(1, PosEncoding::Rotary), (2, PosEncoding::Learned), (4, PosEncoding::Rotary)] {
        let v = build_vocab(&[text], Scheme::WhitespaceWord).unwrap().with_gists(n_g);
        let config = ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab_size: v.len(),
            n_g,
            max_seq_len: 256,
            pos_encoding: pos,
            tied_lm_head: true,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        };
        let mut p = ModelParams::<f32>::init(&config, 9, 0.5);
        // Make punctuation likely so sentences close during decoding.
        for id in v.punct_ids().to_vec() {
            p.embed.row_mut(id as usize).iter_mut().for_each(|x| *x *= 2.0);
        }
        let prompt = v.encode("a b c. d e! f");
        let mut s = DecodeSession::new(&p, &v, &prompt, Sampler::Greedy).unwrap();
        let mut worst = 0f32;
        let mut closed = 0;
        for _ in 0..40 {
            let a = s.processed().unwrap();
            let full = forward(&p, &a, &build_mask(&a)).unwrap();
            let reference = full.logits.row(a.len() - 1);
            for (x, y) in s.next_logits().iter().zip(reference) {
                worst = worst.max((x - y).abs());
            }
            if v.is_punct(s.decode_step().unwrap()) {
                closed += 1;
            }
            s.cache().check_invariants().unwrap();
        }
        assert!(worst < 1e-5, "n_g={n_g}: {worst}");
        println!("n_g={n_g} closed={closed} worst={worst:e}");
    }
}
