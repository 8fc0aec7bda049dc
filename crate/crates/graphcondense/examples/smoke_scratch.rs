use graphcondense::condense::{condense_with_threads, CondenseConfig};
use graphcondense::eval::{self, EdgeSplit};
use graphcondense::rng::Rng;
use graphcondense::synth;

fn main() {
    let mut lmia_ok = 0;
    let mut mia_ok = 0;
    for seed in 0..5u64 {
        let g = synth::generate_sbm("sbm", 1000, 4, 0.05, 0.002, 32, 100 + seed).unwrap();
        let cfg = CondenseConfig {
            reduction_rate: 0.02, epochs: 600, beta: 0.1, lr_feat: 0.001, lr_struct: 0.001,
            edge_threshold: 0.1, checkpoint_every: 10, repeats: 2, seed,
            ..CondenseConfig::default()
        };
        let out = condense_with_threads(&g, &cfg, 2).unwrap();
        let cond = &out.graph;
        let split = EdgeSplit::build(&g, Rng::new(seed).split("att", 0).seed()).unwrap();
        let lp_orig = eval::train_lp_bundle(&g, &split, seed);
        let lp_cond = eval::train_lp_condensed(cond, 0.1, seed).unwrap();
        let lmia_orig = eval::attack_lmia(&lp_orig, &g, &split, 10, seed).unwrap();
        let lmia_cond = eval::attack_lmia(&lp_cond, &g, &split, 10, seed).unwrap();
        let clf_orig = eval::train_node_classifier_bundle(&g, seed);
        let clf_cond = eval::train_node_classifier_condensed(cond, seed);
        let mia_orig = eval::attack_mia(&clf_orig, &g, 10, seed).unwrap();
        let mia_cond = eval::attack_mia(&clf_cond, &g, 10, seed).unwrap();
        let l_ok = lmia_cond.mean <= lmia_orig.mean + 0.01;
        let m_ok = mia_cond.mean <= mia_orig.mean + 0.01;
        lmia_ok += l_ok as u32;
        mia_ok += m_ok as u32;
        println!("seed {seed}: LMIA {:.4} vs {:.4} [{}] MIA {:.4} vs {:.4} [{}]",
            lmia_cond.mean, lmia_orig.mean, l_ok, mia_cond.mean, mia_orig.mean, m_ok);
    }
    println!("lmia {lmia_ok}/5 mia {mia_ok}/5");
}
