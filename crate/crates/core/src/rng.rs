//! Counter-based Gaussian noise.
//!
//! Every noise value in a generated video is a pure function of
//! `(seed, stream, index, element)`, so any frame of an arbitrarily long video
//! can be produced without replaying earlier ones.
//!
//! Layout: Philox4x32-10 with key `[seed & 0xffff_ffff, seed >> 32]` and
//! counter `[block, index & 0xffff_ffff, index >> 32, stream]`. Each block
//! yields four `u32` words; words are mapped to `u = (x + 0.5)·2⁻³²` and each
//! pair `(u₀, u₁)` gives two standard normals by Box–Muller,
//! `√(−2 ln u₀)·cos(2π u₁)` and `√(−2 ln u₀)·sin(2π u₁)`. Element `e` of the
//! vector lives in block `e / 4`, lane `e % 4`.

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

/// Stream identifiers separating independent uses of one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    /// Motion anchor noise, indexed by anchor number.
    Anchor = 1,
    /// Per-layer synthesis noise maps, indexed by noise site.
    SynthesisNoise = 2,
    /// Latent `z` draws, indexed by sample number.
    Latent = 3,
}

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = a as u64 * b as u64;
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[inline]
fn unit(x: u32) -> f64 {
    (x as f64 + 0.5) * (1.0 / 4_294_967_296.0)
}

/// Standard-normal vector for `(seed, stream, index)`.
pub fn normal_vector(seed: u64, stream: Stream, index: u64, len: usize) -> Vec<f64> {
    let key = [seed as u32, (seed >> 32) as u32];
    let mut out = Vec::with_capacity(len + 3);
    let mut block = 0u32;
    while out.len() < len {
        let w = philox4x32_10([block, index as u32, (index >> 32) as u32, stream as u32], key);
        for pair in [(w[0], w[1]), (w[2], w[3])] {
            let r = (-2.0 * unit(pair.0).ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * unit(pair.1);
            out.push(r * theta.cos());
            out.push(r * theta.sin());
        }
        block += 1;
    }
    out.truncate(len);
    out
}

/// Signed index helper: negative anchor positions map to their two's-complement bits.
pub fn signed_index(i: i64) -> u64 {
    i as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors published with the Random123 reference implementation.
    #[test]
    fn philox_known_answers() {
        assert_eq!(philox4x32_10([0; 4], [0; 2]), [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]);
        assert_eq!(philox4x32_10([u32::MAX; 4], [u32::MAX; 2]), [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]);
        assert_eq!(
            philox4x32_10([0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344], [0xa4093822, 0x299f31d0]),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn random_access_is_consistent() {
        let a = normal_vector(3, Stream::Anchor, 5, 10);
        let b = normal_vector(3, Stream::Anchor, 5, 10);
        assert_eq!(a, b);
        // A longer draw shares its prefix.
        assert_eq!(normal_vector(3, Stream::Anchor, 5, 17)[..10], a[..]);
        assert_ne!(normal_vector(3, Stream::Anchor, 6, 10), a);
        assert_ne!(normal_vector(3, Stream::Latent, 5, 10), a);
    }

    #[test]
    fn moments_are_standard_normal() {
        let v = normal_vector(11, Stream::Latent, 0, 200_000);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
