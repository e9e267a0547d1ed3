//! Length-specific terminators: vocabulary, target encoding and the decoding
//! stop rule.
//!
//!     cargo run --example multi_eos

use eoslab::decode::beam_decode;
use eoslab::encoding::{encode_target, EosMode, Vocab};
use eoslab::model::{ModelConfig, Parameters};

fn main() -> eoslab::Result<()> {
    let single = Vocab::new(6, EosMode::Single);
    let multi = Vocab::new(6, EosMode::Multi { l_max: 5 });
    println!("single |V|={} multi |V|={}", single.size(), multi.size());

    let target = [3, 5];
    for vocab in [&single, &multi] {
        let encoded = encode_target(&target, vocab)?;
        let names: Vec<String> = encoded.iter().map(|&id| vocab.token_string(id)).collect();
        println!("{:<6} {:?} -> {}", vocab.eos_mode().to_string(), target, names.join(" "));
    }
    println!("empty output ends with {}", multi.token_string(multi.empty_terminator()));

    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        max_len: 8,
        ..ModelConfig::default()
    };
    let mut params = Parameters::init(config.architecture(multi.size()), 2)?;
    params.tgt_embed.mapv_inplace(|v| v * 40.0);
    let result = beam_decode(&params, &[2, 3, 4], &multi, 4, 5)?;
    for h in &result.hypotheses {
        let end = h.terminator.map(|t| multi.token_string(t)).unwrap_or_default();
        println!("{:>8.3}  {:?} {end}", h.log_prob, h.tokens);
    }
    Ok(())
}
