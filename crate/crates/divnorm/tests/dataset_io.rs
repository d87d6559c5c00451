use divnorm::dataset::{load_dataset, save_dataset};
use divnorm_core::synth::{generate, Provenance, SynthConfig};

#[test]
fn ten_thousand_rows_round_trip_bit_exact() {
    let cfg = SynthConfig { n_ids: 250, outfits_per_id: 5, samples_per_outfit: 8, seed: 11, ..SynthConfig::default() };
    let ds = generate(&cfg).unwrap();
    assert_eq!(ds.len(), 10_000);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("big.csv");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.meta, ds.meta);
    let bits = |m: &divnorm_core::Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.features), bits(&ds.features));
    assert_eq!(back.provenance, Provenance::Ingested(path.display().to_string()));

    let again = tmp.path().join("again.csv");
    save_dataset(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
