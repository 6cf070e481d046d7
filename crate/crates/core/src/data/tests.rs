use std::f64::consts::PI;

use proptest::prelude::*;

use super::image::{decode_pnm, to_tensor};
use super::*;
use crate::dsp::wav::{decode, encode, quantize};

fn cfg() -> DataConfig {
    DataConfig::default()
}

fn tone(bin: f64, cfg: &DataConfig) -> Waveform {
    let df = cfg.sample_rate as f64 / cfg.window_len as f64;
    let sr = cfg.sample_rate as f64;
    let s = (0..cfg.clip_len()).map(|i| 0.1 * (2.0 * PI * bin * df * i as f64 / sr).sin()).collect();
    Waveform::new(s, cfg.sample_rate).unwrap()
}

fn with_wave(mut s: Sample, w: Waveform) -> Sample {
    s.waveform = w;
    s
}

#[test]
fn generation_is_deterministic() {
    let c = cfg();
    let a = generate_category(2, 99, &c).unwrap();
    let b = generate_category(2, 99, &c).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.waveform, generate_category(2, 100, &c).unwrap().waveform);
    assert_eq!(a.waveform.len(), c.clip_len());
    assert_eq!(a.image.shape(), &[3, 32, 32]);
    let rms = (a.waveform.energy() / a.waveform.len() as f64).sqrt();
    let peak = a.waveform.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((rms - c.rms).abs() < 1e-12 || ((peak - PEAK_LIMIT).abs() < 1e-12 && rms < c.rms));
    assert!(generate_category(4, 0, &c).is_err());
}

/// Energy of `w` inside bins `[lo, hi)`, from a direct DFT of the whole clip.
fn band_energy(w: &Waveform, lo: usize, hi: usize, cfg: &DataConfig) -> f64 {
    let n = w.len();
    let bin_hz = cfg.sample_rate as f64 / cfg.window_len as f64;
    let (f_lo, f_hi) = (lo as f64 * bin_hz, hi as f64 * bin_hz);
    let mut e = 0.0;
    for k in 0..=n / 2 {
        let f = k as f64 * cfg.sample_rate as f64 / n as f64;
        if f < f_lo || f >= f_hi {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in w.samples().iter().enumerate() {
            let ph = -2.0 * PI * (k * i % n) as f64 / n as f64;
            re += x * ph.cos();
            im += x * ph.sin();
        }
        e += re * re + im * im;
    }
    e
}

#[test]
fn neighbouring_categories_barely_overlap() {
    let c = cfg();
    let a = generate_category(0, 5, &c).unwrap();
    let b = generate_category(1, 5, &c).unwrap();
    let (alo, ahi) = band_of(0, &c);
    let (blo, bhi) = band_of(1, &c);
    let total = c.framing().freq_bins();
    let ea = band_energy(&a.waveform, 0, total, &c);
    let eb = band_energy(&b.waveform, 0, total, &c);
    // Share of each source's energy falling in the other's band.
    let leak_a = band_energy(&a.waveform, blo, bhi, &c) / ea;
    let leak_b = band_energy(&b.waveform, alo, ahi, &c) / eb;
    assert!(leak_a < 0.05 && leak_b < 0.05, "{leak_a} {leak_b}");
    assert!(band_energy(&a.waveform, alo, ahi, &c) / ea > 0.8);
}

#[test]
fn image_means_differ_by_category() {
    let c = cfg();
    let means: Vec<[f64; 3]> = (0..c.categories)
        .map(|k| {
            let img = generate_category(k, 1, &c).unwrap().image;
            let s = c.image_size * c.image_size;
            let mut m = [0.0; 3];
            for (ch, v) in m.iter_mut().enumerate() {
                *v = img.data()[ch * s..(ch + 1) * s].iter().sum::<f64>() / s as f64;
            }
            m
        })
        .collect();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = (0..3).map(|ch| (means[i][ch] - means[j][ch]).abs()).sum();
            assert!(d > 0.05, "{i} vs {j}: {d}");
        }
    }
    let img = generate_category(0, 1, &c).unwrap().image;
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn disjoint_tones_give_band_indicator_masks() {
    let c = cfg();
    let base = generate_category(0, 1, &c).unwrap();
    let s0 = with_wave(base.clone(), tone(4.0, &c));
    let s1 = with_wave(generate_category(1, 1, &c).unwrap(), tone(20.0, &c));
    let item = build_mixture(vec![s0, s1], c.framing(), vec![base.clone(), base]).unwrap();
    let (m0, m1) = (item.gt_masks[0].bits(), item.gt_masks[1].bits());
    let frames = m0.cols();
    // Interior frames only: the edge frames see the zero padding.
    for t in 2..frames - 2 {
        for f in 3..=5 {
            assert_eq!((m0.get(f, t), m1.get(f, t)), (1.0, 0.0), "bin {f} frame {t}");
        }
        for f in 19..=21 {
            assert_eq!((m0.get(f, t), m1.get(f, t)), (0.0, 1.0), "bin {f} frame {t}");
        }
    }
    for (a, b) in m0.data().iter().zip(m1.data()) {
        assert!(a + b >= 1.0);
    }
    assert_eq!(item.contrast_pairs.len(), 2);
    assert_eq!(item.contrast_pairs[0].label, 1);
    assert_eq!(item.contrast_pairs[1].label, 0);
}

#[test]
fn duplicate_sources_give_all_ones() {
    let c = cfg();
    let s = generate_category(3, 8, &c).unwrap();
    let item = build_mixture(vec![s.clone(), s.clone()], c.framing(), vec![s.clone(), s]).unwrap();
    for m in &item.gt_masks {
        assert!(m.bits().data().iter().all(|&v| v == 1.0));
    }
}

#[test]
fn source_count_is_checked() {
    let c = cfg();
    let s = generate_category(0, 1, &c).unwrap();
    assert!(matches!(build_mixture(vec![s.clone()], c.framing(), vec![s.clone()]), Err(DataError::SourceCount(1))));
    let five = vec![s.clone(); 5];
    assert!(matches!(build_mixture(five.clone(), c.framing(), five), Err(DataError::SourceCount(5))));
}

#[test]
fn four_source_masks_partition_and_mixture_is_linear() {
    let c = cfg();
    let samples: Vec<Sample> = (0..4).map(|k| generate_category(k, 17, &c).unwrap()).collect();
    let item = build_mixture(samples.clone(), c.framing(), samples.clone()).unwrap();
    let specs: Vec<ComplexSpectrogram> = samples.iter().map(|s| stft_with(&s.waveform, c.framing()).unwrap()).collect();
    let mags: Vec<_> = specs.iter().map(|s| s.magnitude()).collect();
    let (h, w) = item.gt_masks[0].shape();
    for f in 0..h {
        for t in 0..w {
            let vals: Vec<f64> = mags.iter().map(|m| m.grid().get(f, t)).collect();
            let best = vals.iter().cloned().fold(f64::MIN, f64::max);
            for (n, m) in item.gt_masks.iter().enumerate() {
                assert_eq!(m.bits().get(f, t), (vals[n] == best) as u8 as f64);
            }
        }
    }
    let mut sum = specs[0].clone();
    for s in &specs[1..] {
        sum = sum.add(s).unwrap();
    }
    let num: f64 = item.spectrogram.bins().iter().zip(sum.bins()).map(|(a, b)| (a - b).norm_sqr()).sum();
    let den: f64 = sum.bins().iter().map(|b| b.norm_sqr()).sum();
    assert!((num / den).sqrt() < 1e-9);
    let total: Vec<f64> = (0..c.clip_len()).map(|i| samples.iter().map(|s| s.waveform.samples()[i]).sum()).collect();
    assert_eq!(item.mixture.samples(), &total[..]);
}

#[test]
fn wav_round_trip_of_16_bit_content() {
    let s: Vec<f64> = (0..500).map(|i| ((i * 7919) % 65535) as f64 / 32767.0 - 1.0).collect();
    let w = Waveform::new(s.iter().map(|&v| quantize(v) as f64 / 32767.0).collect(), 8000).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_wav(&w, dir.path().join("a.wav")).unwrap();
    assert_eq!(load_wav(dir.path().join("a.wav")).unwrap(), w);
    let bytes = encode(&w);
    assert!(matches!(decode(&bytes[..20]), Err(WavError::Malformed(_))));
}

#[test]
fn solid_ppm_gives_constant_tensor() {
    let mut bytes = b"P6\n# solid\n4 3\n255\n".to_vec();
    bytes.extend([10u8, 200, 255].repeat(12));
    let img = decode_pnm(&bytes).unwrap();
    let t = to_tensor(&img, 2);
    assert_eq!(t.shape(), &[3, 2, 2]);
    for (c, v) in [10.0, 200.0, 255.0].iter().enumerate() {
        assert!(t.data()[c * 4..(c + 1) * 4].iter().all(|&x| x == v / 255.0));
    }
    assert!(matches!(decode_pnm(b"P6\n4 3\n"), Err(ImageError::Malformed(_))));
    assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0 0 0"), Err(ImageError::Unsupported(_))));
    assert!(matches!(decode_pnm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(ImageError::Unsupported(_))));
    assert!(matches!(decode_pnm(b"P6\n2 2\n255\n\0\0\0"), Err(ImageError::Malformed(_))));
}

#[test]
fn ppm_save_load_round_trip() {
    let c = cfg();
    let s = generate_category(1, 3, &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ppm");
    save_ppm(&s.image, &p).unwrap();
    let back = load_image(&p, c.image_size).unwrap();
    for (a, b) in s.image.data().iter().zip(back.data()) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn splits_are_disjoint_and_deterministic() {
    let c = cfg();
    let sizes = SplitSizes { train: 3, val: 1, test: 2 };
    let a = Dataset::generate(&c, 7, sizes, 1).unwrap();
    let b = Dataset::generate(&c, 7, sizes, 3).unwrap();
    let ids = |d: &Dataset, s: Split| d.pool(s).samples.iter().map(|x| x.id.clone()).collect::<HashSet<_>>();
    for s in Split::ALL {
        assert_eq!(a.pool(s).samples, b.pool(s).samples);
    }
    assert!(ids(&a, Split::Train).is_disjoint(&ids(&a, Split::Test)));
    assert!(ids(&a, Split::Train).is_disjoint(&ids(&a, Split::Val)));
    assert!(ids(&a, Split::Val).is_disjoint(&ids(&a, Split::Test)));
    assert_eq!(a.train.len(), 12);
    let m1 = a.test.mixture(c.framing(), 2, 11, 4).unwrap();
    let m2 = b.test.mixture(c.framing(), 2, 11, 4).unwrap();
    assert_eq!(m1.mixture, m2.mixture);
    assert_eq!(m1.contrast_pairs, m2.contrast_pairs);
    assert_ne!(m1.sources[0].category, m1.sources[1].category);
    for (p, (s, q)) in m1.contrast_pairs.iter().zip(m1.sources.iter().zip(&m1.partners)) {
        assert_eq!(p.label == 1, s.category == q.category);
        if p.label == 1 {
            assert_ne!(s.id, q.id);
        }
    }
}

#[test]
fn manifest_round_trip() {
    let c = cfg();
    let d = Dataset::generate(&c, 1, SplitSizes { train: 2, val: 1, test: 1 }, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = d.save(dir.path()).unwrap();
    assert_eq!(m.items.len(), 16);
    let back = Dataset::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(back.config, c);
    for s in Split::ALL {
        let (x, y) = (&d.pool(s).samples, &back.pool(s).samples);
        assert_eq!(x.len(), y.len());
        for (a, b) in x.iter().zip(y) {
            assert_eq!((a.id.as_str(), a.category), (b.id.as_str(), b.category));
            for (u, v) in a.waveform.samples().iter().zip(b.waveform.samples()) {
                assert!((u - v).abs() <= 0.5 / 32767.0 + 1e-15);
            }
        }
    }
    std::fs::write(dir.path().join("bad.json"), "{\"data\": 1}").unwrap();
    assert!(matches!(Dataset::load(dir.path().join("bad.json")), Err(DataError::Manifest(_))));
}

#[test]
fn ordered_parallel_map() {
    let r: Result<Vec<usize>, ()> = parallel_ordered(50, 4, |i| Ok(i * i));
    assert_eq!(r.unwrap(), (0..50).map(|i| i * i).collect::<Vec<_>>());
    let e: Result<Vec<usize>, usize> = parallel_ordered(10, 3, |i| if i == 6 { Err(i) } else { Ok(i) });
    assert_eq!(e, Err(6));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn sample_seeds_never_collide_across_splits(seed in any::<u64>(), i in 0u64..1_000_000, j in 0u64..1_000_000) {
        prop_assert_ne!(sample_seed(seed, Split::Train, i), sample_seed(seed, Split::Test, j));
        prop_assert_ne!(sample_seed(seed, Split::Train, i), sample_seed(seed, Split::Val, j));
    }
}

#[test]
fn sources_stay_below_half_scale() {
    let c = cfg();
    for k in 0..c.categories {
        for seed in 0..20 {
            let s = generate_category(k, seed, &c).unwrap();
            let peak = s.waveform.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(peak <= PEAK_LIMIT + 1e-12 && peak < 0.5, "category {k} seed {seed}: peak {peak}");
        }
    }
}
