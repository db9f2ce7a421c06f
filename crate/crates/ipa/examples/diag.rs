use ipa::checkpoint::load_checkpoint;
use ipa::corpus::*;
use ipa::decode::*;
use ipa::par::mix_seed;
use ipa::reward::ordered_coverage;
use ipa::tailor::*;

fn main() {
    let dir = "/tmp/run_kw22_s0";
    let (base, _) = load_checkpoint(std::path::Path::new(&format!("{dir}/base.ckpt"))).unwrap();
    let (adapter, manifest) = load_checkpoint(std::path::Path::new(&format!("{dir}/adapter.ckpt"))).unwrap();
    let base = base.frozen();
    let vocab = base.vocab.clone();
    let control = manifest.unwrap().control_token;
    let inst = keyword_instances(&vocab, 12, 3, mix_seed(0, 9, 0)).unwrap();
    let tp = TailoredPolicy::new(&base, &adapter).unwrap().with_control(control).unwrap();
    for it in inst.iter().take(12) {
        // chain probabilities under base and tailored
        let (b0, _, f0) = tp.next_dist_detail(&it.prompt, &[], 1.0).unwrap();
        let k = &it.keywords;
        let g1 = vec![k[0]];
        let (b1, _, f1) = tp.next_dist_detail(&it.prompt, &g1, 1.0).unwrap();
        let g2 = vec![k[0], k[1]];
        let (b2, _, f2) = tp.next_dist_detail(&it.prompt, &g2, 1.0).unwrap();
        let dec = DecoderSpec::nucleus(0.9, 14, mix_seed(0, 77, it.keywords[0] as u64));
        let out = sample_sequence(&tp, &it.prompt, &dec).unwrap();
        let cov = ordered_coverage(&out, k, &vocab);
        println!(
            "{} | P(k1): b {:.2} t {:.2} | P(k2|k1): b {:.2} t {:.2} | P(k3|k1k2): b {:.2} t {:.2} | {} {:?}",
            vocab.decode(&it.prompt),
            b0.get(k[0] as usize), f0.get(k[0] as usize),
            b1.get(k[1] as usize), f1.get(k[1] as usize),
            b2.get(k[2] as usize), f2.get(k[2] as usize),
            if cov { "COVER" } else { "     " },
            vocab.decode(&out),
        );
    }
}
