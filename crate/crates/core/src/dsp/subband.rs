use crate::dsp::stft::{SpecKind, Spectrogram};
use crate::error::{Error, Result};

/// Log-spaced band edges over `n_bins` bins: `edges[0] = 0`,
/// `edges[n_bands] = n_bins`, interior edges at `round(n_bins^(i/n_bands))`
/// nudged upward where needed so that every band is non-empty.
pub fn subband_edges(n_bins: usize, n_bands: usize) -> Result<Vec<usize>> {
    if n_bands == 0 || n_bands > n_bins {
        return Err(Error::Config(format!("{n_bands} bands over {n_bins} bins")));
    }
    let mut edges = vec![0usize; n_bands + 1];
    edges[n_bands] = n_bins;
    for i in 1..n_bands {
        let geo = (n_bins as f64).powf(i as f64 / n_bands as f64).round() as usize;
        edges[i] = geo.max(edges[i - 1] + 1);
    }
    // keep room for the remaining bands at the top
    for i in (1..n_bands).rev() {
        edges[i] = edges[i].min(edges[i + 1] - 1);
    }
    Ok(edges)
}

/// Partitions the bins of `s` into `n_bands` log-spaced slices.
pub fn subband_decompose(s: &Spectrogram, n_bands: usize) -> Result<Vec<Spectrogram>> {
    let edges = subband_edges(s.n_bins, n_bands)?;
    Ok(edges
        .windows(2)
        .map(|e| {
            let (lo, hi) = (e[0], e[1]);
            let mut data = Vec::with_capacity(s.n_frames * (hi - lo));
            for t in 0..s.n_frames {
                data.extend_from_slice(&s.row(t)[lo..hi]);
            }
            Spectrogram {
                data,
                n_frames: s.n_frames,
                n_bins: hi - lo,
                kind: SpecKind::Subband,
                frame_spec: s.frame_spec,
                padding: s.padding,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft::{FrameSpec, Padding};
    use proptest::prelude::*;

    fn spectrogram(frames: usize, bins: usize) -> Spectrogram {
        Spectrogram {
            data: (0..frames * bins).map(|i| i as f32).collect(),
            n_frames: frames,
            n_bins: bins,
            kind: SpecKind::Linear,
            frame_spec: FrameSpec::new(320, 1024, 16000).unwrap(),
            padding: Padding::Center,
        }
    }

    #[test]
    fn one_band_is_identity() {
        let s = spectrogram(4, 33);
        let bands = subband_decompose(&s, 1).unwrap();
        assert_eq!(bands.len(), 1);
        assert_eq!(bands[0].data, s.data);
    }

    #[test]
    fn too_many_bands_rejected() {
        assert!(matches!(subband_decompose(&spectrogram(2, 5), 6), Err(Error::Config(_))));
    }

    #[test]
    fn edges_are_geometric_within_rounding() {
        for (bins, n) in [(513usize, 3usize), (129, 2), (257, 4), (1025, 5)] {
            let e = subband_edges(bins, n).unwrap();
            for i in 1..n {
                let geo = (bins as f64).powf(i as f64 / n as f64);
                assert!((e[i] as f64 - geo).abs() <= 1.0, "{bins}/{n}: edge {i} = {} vs {geo}", e[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn bands_partition_bins(bins in 1usize..600, n in 1usize..12) {
            prop_assume!(n <= bins);
            let s = spectrogram(3, bins);
            let bands = subband_decompose(&s, n).unwrap();
            prop_assert_eq!(bands.len(), n);
            prop_assert_eq!(bands.iter().map(|b| b.n_bins).sum::<usize>(), bins);
            prop_assert!(bands.iter().all(|b| b.n_bins >= 1));
            // concatenating rows band by band reproduces the original row
            for t in 0..3 {
                let row: Vec<f32> = bands.iter().flat_map(|b| b.row(t).to_vec()).collect();
                prop_assert_eq!(row.as_slice(), s.row(t));
            }
        }
    }
}
