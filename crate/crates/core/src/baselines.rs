//! Non-learning upsampling baselines: nearest-neighbour replication and
//! shape-based interpolation of signed distance fields along depth.

use crate::degrade::ScaleFactor;
use crate::error::{Error, Result};
use crate::volume::LabelVolume;

fn hr_spacing(lr: &LabelVolume, s: [usize; 3]) -> [f64; 3] {
    let sp = lr.spacing();
    [0, 1, 2].map(|a| sp[a] / s[a] as f64)
}

/// Replicates each LR voxel into an `s_d x s_h x s_w` block.
pub fn nn_upsample(lr: &LabelVolume, s: &ScaleFactor) -> Result<LabelVolume> {
    let f = s.integer()?;
    let [d, h, w] = lr.dims();
    let dims = [d * f[0], h * f[1], w * f[2]];
    let mut labels = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                labels.push(lr.get(z / f[0], y / f[1], x / f[2]));
            }
        }
    }
    Ok(lr.with_labels(dims, hr_spacing(lr, f), labels))
}

/// Exact 1D squared Euclidean distance transform (lower envelope of parabolas).
/// `f` holds 0 at feature sites and `INFINITY` elsewhere on input, squared
/// distances on output.
fn edt_1d(f: &mut [f64], v: &mut [usize], zk: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => return,
    };
    let mut k = 0usize;
    v[0] = first;
    zk[0] = f64::NEG_INFINITY;
    zk[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        let mut sq;
        loop {
            let p = v[k];
            sq = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            // zk[0] is -inf, so k never underflows
            if sq > zk[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        zk[k] = sq;
        zk[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while zk[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
    f.copy_from_slice(out);
}

/// Squared distance from every pixel of an `h x w` image to the nearest pixel
/// where `site` is true; `INFINITY` everywhere if there is none.
pub fn squared_edt(site: &[bool], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(site.len(), h * w);
    let mut g: Vec<f64> = site.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = h.max(w);
    let (mut f, mut v, mut zk, mut out) = (vec![0.0; n], vec![0usize; n], vec![0.0; n + 1], vec![0.0; n]);
    for x in 0..w {
        for y in 0..h {
            f[y] = g[y * w + x];
        }
        edt_1d(&mut f[..h], &mut v, &mut zk, &mut out[..h]);
        for y in 0..h {
            g[y * w + x] = f[y];
        }
    }
    for y in 0..h {
        let row = &mut g[y * w..(y + 1) * w];
        f[..w].copy_from_slice(row);
        edt_1d(&mut f[..w], &mut v, &mut zk, &mut out[..w]);
        row.copy_from_slice(&f[..w]);
    }
    g
}

/// Signed distance of each pixel to the boundary of the `inside` region:
/// positive inside (distance to the nearest outside pixel minus one half),
/// negative outside. Distances are capped at the image diagonal.
pub fn signed_distance(inside: &[bool], h: usize, w: usize) -> Vec<f64> {
    let cap = ((h * h + w * w) as f64).sqrt();
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    let to_out = squared_edt(&outside, h, w);
    let to_in = squared_edt(inside, h, w);
    inside
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if b {
                to_out[i].sqrt().min(cap) - 0.5
            } else {
                -(to_in[i].sqrt().min(cap) - 0.5)
            }
        })
        .collect()
}

/// Depth-only shape-based interpolation.
///
/// Each foreground class gets a signed distance field per LR slice; fields are
/// linearly interpolated between the HR depths that LR slices align to
/// (`k * s_d + (s_d - 1) / 2`, clamped beyond the end slices). A voxel takes
/// the class with the largest positive interpolated distance (lowest id on
/// ties), background otherwise.
pub fn sbi_upsample(lr: &LabelVolume, s: &ScaleFactor) -> Result<LabelVolume> {
    let f = s.integer()?;
    if f[1] != 1 || f[2] != 1 {
        return Err(Error::InvalidParameter(format!(
            "shape-based interpolation is depth-only; in-plane scale must be 1, got {:?}",
            s.get()
        )));
    }
    let sd = f[0];
    let [d, h, w] = lr.dims();
    let plane = h * w;
    let classes = lr.num_classes();
    let hd = d * sd;

    // fields[c - 1][k] is the signed distance of class c on LR slice k
    let fields: Vec<Vec<Vec<f64>>> = (1..classes)
        .map(|c| {
            (0..d)
                .map(|k| {
                    let mask: Vec<bool> = lr.depth_slice(k).iter().map(|&l| l as usize == c).collect();
                    signed_distance(&mask, h, w)
                })
                .collect()
        })
        .collect();

    let offset = (sd - 1) / 2;
    let mut labels = vec![0u8; hd * plane];
    for z in 0..hd {
        let pos = (z as f64 - offset as f64) / sd as f64;
        let pos = pos.clamp(0.0, (d - 1) as f64);
        let k0 = (pos.floor() as usize).min(d - 1);
        let k1 = (k0 + 1).min(d - 1);
        let t = pos - k0 as f64;
        let out = &mut labels[z * plane..(z + 1) * plane];
        for (i, o) in out.iter_mut().enumerate() {
            let mut best = 0.0;
            let mut label = 0u8;
            for (c, field) in fields.iter().enumerate() {
                let v = if t == 0.0 { field[k0][i] } else { (1.0 - t) * field[k0][i] + t * field[k1][i] };
                if v > best {
                    best = v;
                    label = (c + 1) as u8;
                }
            }
            *o = label;
        }
    }
    Ok(lr.with_labels([hd, h, w], hr_spacing(lr, f), labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: [usize; 3], labels: Vec<u8>) -> LabelVolume {
        LabelVolume::with_default_names(dims, [2.0, 1.0, 1.0], labels).unwrap()
    }

    fn s(d: f64) -> ScaleFactor {
        ScaleFactor::new([d, 1.0, 1.0]).unwrap()
    }

    fn brute_squared(site: &[bool], h: usize, w: usize) -> Vec<f64> {
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                site.iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(j, _)| {
                        let (py, px) = ((j / w) as f64, (j % w) as f64);
                        (y - py).powi(2) + (x - px).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn disc(n: usize, r: f64, label: u8) -> Vec<u8> {
        let c = (n as f64 - 1.0) / 2.0;
        (0..n * n)
            .map(|i| {
                let (y, x) = ((i / n) as f64, (i % n) as f64);
                if (y - c).powi(2) + (x - c).powi(2) <= r * r { label } else { 0 }
            })
            .collect()
    }

    #[test]
    fn nn_identity_and_replication() {
        let v = vol([2, 2, 2], vec![0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(nn_upsample(&v, &ScaleFactor::identity()).unwrap(), v);
        let up = nn_upsample(&vol([2, 1, 1], vec![1, 2]), &s(2.0)).unwrap();
        assert_eq!(up.labels(), &[1, 1, 2, 2]);
        assert_eq!(up.spacing(), [1.0, 1.0, 1.0]);
        assert!(nn_upsample(&v, &s(1.5)).is_err());
    }

    #[test]
    fn nn_inverts_slab_constant_downsampling() {
        let lr = vol([3, 4, 4], (0..48).map(|i| (i * 7 % 4) as u8).collect());
        let hr = nn_upsample(&lr, &s(5.0)).unwrap();
        let (back, _) = crate::degrade::degrade(
            &hr,
            &crate::degrade::DegradationSpec::for_regime(crate::degrade::Regime::NoMotion, s(5.0), 0),
        )
        .unwrap();
        assert_eq!(back.labels(), lr.labels());
        let again = nn_upsample(&back, &s(5.0)).unwrap();
        for c in 1..4 {
            assert_eq!(crate::volume::dice(&again, &hr, c).unwrap(), 1.0);
        }
    }

    #[test]
    fn edt_matches_brute_force() {
        let (h, w) = (9, 13);
        for seed in 0..20u64 {
            let site: Vec<bool> = (0..h * w).map(|i| (i as u64 * 2654435761 + seed * 97) .is_multiple_of(11)).collect();
            assert_eq!(squared_edt(&site, h, w), brute_squared(&site, h, w));
        }
        assert!(squared_edt(&[false; 6], 2, 3).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn identical_slices_interpolate_to_themselves() {
        let slice = disc(11, 3.0, 2);
        let mut labels = slice.clone();
        labels.extend(&slice);
        let up = sbi_upsample(&vol([2, 11, 11], labels), &s(4.0)).unwrap();
        for z in 0..8 {
            assert_eq!(up.depth_slice(z), slice.as_slice());
        }
    }

    #[test]
    fn disc_radii_interpolate_to_the_midpoint() {
        let n = 21;
        let mut labels = disc(n, 2.0, 1);
        labels.extend(disc(n, 4.0, 1));
        let up = sbi_upsample(&vol([2, n, n], labels), &s(2.0)).unwrap();
        // LR slices align to HR depths 0 and 2; depth 1 sits halfway
        let mid = up.depth_slice(1);
        let area = mid.iter().filter(|&&l| l == 1).count() as f64;
        let radius = (area / std::f64::consts::PI).sqrt();
        assert!((radius - 3.0).abs() <= 0.5, "radius {radius}");
        // the extent along the central row agrees as well
        let row = &mid[10 * n..11 * n];
        let half_width = row.iter().filter(|&&l| l == 1).count() as f64 / 2.0;
        assert!((half_width - 3.0).abs() <= 0.5, "half width {half_width}");
    }

    #[test]
    fn absent_class_stays_absent() {
        let mut labels = disc(9, 2.0, 1);
        labels.extend(disc(9, 3.0, 1));
        let up = sbi_upsample(&vol([2, 9, 9], labels), &s(3.0)).unwrap();
        assert_eq!(up.count(2), 0);
        assert_eq!(up.count(3), 0);
    }

    #[test]
    fn sbi_rejects_in_plane_scaling() {
        let v = vol([1, 2, 2], vec![0; 4]);
        assert!(sbi_upsample(&v, &ScaleFactor::new([2.0, 2.0, 1.0]).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn sbi_reproduces_aligned_slices(seed in any::<u64>(), sd in 1usize..6) {
            let dims = [3, 6, 7];
            let labels: Vec<u8> = (0..126u64).map(|i| ((i.wrapping_mul(seed | 1) >> 3) % 4) as u8).collect();
            let v = vol(dims, labels);
            let up = sbi_upsample(&v, &s(sd as f64)).unwrap();
            for k in 0..3 {
                prop_assert_eq!(up.depth_slice(k * sd + (sd - 1) / 2), v.depth_slice(k));
            }
            prop_assert!(up.labels().iter().all(|&l| l < 4));
            if sd == 1 {
                prop_assert_eq!(&up, &v);
                prop_assert_eq!(&nn_upsample(&v, &s(1.0)).unwrap(), &v);
            }
        }
    }
}
