//! Builds the toy encoder-decoder, lists where modules can attach, and runs
//! one frozen forward pass.

use s3pet::autodiff::Tape;
use s3pet::backbone::{enumerate_sites, Backbone, BackboneConfig, Batch, NoHook};

fn main() -> s3pet::Result<()> {
    let cfg = BackboneConfig::default();
    let bb = Backbone::new(cfg.clone())?;
    println!(
        "{}+{} layers, d = {}, {} frozen parameters, fingerprint {:016x}",
        cfg.num_encoder_layers,
        cfg.num_decoder_layers,
        cfg.hidden_dim,
        bb.param_count(),
        bb.fingerprint()
    );

    let sites = enumerate_sites(&cfg);
    println!("{} attachment sites, first few:", sites.len());
    for s in sites.iter().take(6) {
        println!("  {s}");
    }

    let batch = Batch::new(2, 4, 1, vec![3, 1, 4, 1, 5, 9, 2, 6], vec![0, 0], vec![7, 8])?;
    let mut tape = Tape::new();
    let logits = bb.forward(&mut tape, &batch, &mut NoHook)?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    println!("logits {:?}, loss {:.4}", tape.shape(logits), tape.item(loss));

    // weights round-trip through bytes with the same fingerprint
    let again = Backbone::from_bytes(&bb.to_bytes())?;
    assert_eq!(again.fingerprint(), bb.fingerprint());
    Ok(())
}
