use depmicrodiff::vae::*;
use rand::SeedableRng;
fn main() {
    let dir = std::env::temp_dir();
    let path = dir.join("vae_probe.json");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    let cfg = VaeConfig { token_dim: 3, hidden: 16, lr: 2e-3, batch: 8, epochs: 60, patience: 60, seed: 10 };
    let params = VaeParams::init(3, &cfg, &mut rng);
    println!("orig embed_w[0][0] = {}", params.embed_w[(0,0)]);
    save_checkpoint(&params, &["f0".into(),"f1".into(),"f2".into()], &path).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();
    println!("load embed_w[0][0] = {}", loaded.embed_w[(0,0)]);
    let text = std::fs::read_to_string(&path).unwrap();
    println!("json head: {}", &text[..300.min(text.len())]);
}
