//! Tone corpus → features → a few training steps → checkpoint → synthesis.

use tacotron_core::corpus::{generate_toyset, FeatureCache, Featurizer, ToysetSpec};
use tacotron_core::dsp::{read_wav, SpectralConfig};
use tacotron_core::model::{ModelConfig, Tacotron};
use tacotron_core::synth::{export_diagnostics, synthesize, SynthConfig};
use tacotron_core::text::Charset;
use tacotron_core::trainer::{load_checkpoint, RunDir, TrainConfig, Trainer};

#[test]
fn end_to_end_on_three_tone_utterances() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToysetSpec {
        utterances: 3,
        ..Default::default()
    };
    let manifest = generate_toyset(&spec, dir.path().join("toy")).unwrap();
    let spectral = SpectralConfig::default();
    let featurizer = Featurizer::new(spectral.clone()).unwrap();
    let cache = FeatureCache::new(dir.path().join("cache"), &spectral).unwrap();
    let charset = Charset::default();
    let records: Vec<_> = featurizer
        .featurize_all(&manifest, &charset, Some(&cache))
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap();

    // centred frames: 1 + ⌊samples / hop⌋ with 2400 samples per character, hop 300
    for (rec, m) in records.iter().zip(&manifest.records) {
        assert_eq!(rec.frames(), 1 + 8 * m.text.len());
        assert_eq!(read_wav(&m.wav_path).unwrap().len(), 2400 * m.text.len());
    }

    let model = Tacotron::new(ModelConfig::tiny(), 2).unwrap();
    let config = TrainConfig {
        max_steps: 4,
        checkpoint_every: 2,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    let run = RunDir::new(dir.path().join("run"));
    let mut losses = Vec::new();
    trainer
        .fit(&records, &spectral, &charset, Some(&run), |m| losses.push(m.total_loss()))
        .unwrap();
    assert_eq!(losses.len(), 4);
    assert!(losses.iter().all(|l| l.is_finite()));

    let ck = load_checkpoint(run.latest()).unwrap();
    assert_eq!(ck.step, 4);
    let cfg = SynthConfig {
        max_decoder_steps: Some(20),
        inference_dropout: false,
        ..Default::default()
    };
    let result = synthesize(&manifest.records[0].text, &ck.model, &ck.charset, &ck.spectral, &cfg).unwrap();
    // 12.5 ms per frame
    let expected_s = (result.linear.rows() - 1) as f64 * 0.0125;
    assert!((result.waveform.duration_s() - expected_s).abs() < 1e-9);
    let files = export_diagnostics(&result, dir.path().join("out"), "toy").unwrap();
    assert_eq!(files.len(), 6);
    assert_eq!(read_wav(dir.path().join("out/toy.wav")).unwrap().len(), result.waveform.len());
}
