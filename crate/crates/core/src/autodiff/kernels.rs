//! Forward and backward kernels for grouped 2-D convolution and group
//! normalization. Reductions always run in a fixed order so results are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize, groups: usize) -> Self {
        ConvSpec {
            groups,
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_geometry(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let (b, cin, h, w) = input.dims4(OP)?;
    let (cout, cin_g, kh, kw) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape(OP, format!("weight must be rank 4, got {:?}", weight.shape()))),
    };
    if kh != kw {
        return Err(Error::shape(OP, format!("square kernels only, got {kh}x{kw}")));
    }
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 {
        return Err(Error::invalid(
            OP,
            format!("groups={g} must divide in_channels={cin} and out_channels={cout}"),
        ));
    }
    if cin / g != cin_g {
        return Err(Error::shape(
            OP,
            format!("weight expects {cin_g} input channels per group, input gives {}", cin / g),
        ));
    }
    if spec.stride == 0 {
        return Err(Error::invalid(OP, "stride must be positive"));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::shape(OP, format!("bias {:?} vs {cout} output channels", bias.shape())));
        }
    }
    let (hp, wp) = (h + 2 * spec.padding, w + 2 * spec.padding);
    if hp < kh || wp < kw {
        return Err(Error::shape(OP, "kernel larger than padded input"));
    }
    Ok(ConvGeom {
        b,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / g,
        k: kh,
        ho: (hp - kh) / spec.stride + 1,
        wo: (wp - kw) / spec.stride + 1,
    })
}

/// Output indices `o` in `0..n_out` for which `o*stride + tap - pad` lands in `0..n_in`.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi_num = n_in + pad;
    let hi = if hi_num > tap { (hi_num - tap - 1) / stride + 1 } else { 0 };
    (lo.min(n_out), hi.min(n_out).max(lo.min(n_out)))
}

/// Grouped cross-correlation. `weight` is `[Cout, Cin/groups, k, k]`.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = conv_geometry(input, weight, bias, spec)?;
    let (s, p) = (spec.stride, spec.padding);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; g.b * g.cout * plane_out];
    for bi in 0..g.b {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let dst = &mut out[(bi * g.cout + oc) * plane_out..][..plane_out];
            if let Some(bias) = bias {
                dst.fill(bias.data()[oc]);
            }
            for icl in 0..g.cin_g {
                let ic = grp * g.cin_g + icl;
                let src = &x[(bi * g.cin + ic) * plane_in..][..plane_in];
                let wbase = (oc * g.cin_g + icl) * g.k * g.k;
                for kh in 0..g.k {
                    let (oh0, oh1) = valid_range(kh, p, s, g.h, g.ho);
                    for kw in 0..g.k {
                        let wv = wt[wbase + kh * g.k + kw];
                        let (ow0, ow1) = valid_range(kw, p, s, g.w, g.wo);
                        for oh in oh0..oh1 {
                            let ih = oh * s + kh - p;
                            let row = &src[ih * g.w..][..g.w];
                            let drow = &mut dst[oh * g.wo..][..g.wo];
                            if s == 1 {
                                let off = kw + ow0 - p;
                                for (d, &xv) in drow[ow0..ow1].iter_mut().zip(&row[off..off + (ow1 - ow0)]) {
                                    *d += wv * xv;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    drow[ow] += wv * row[ow * s + kw - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.b, g.cout, g.ho, g.wo], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Vector-Jacobian products of [`conv2d_forward`].
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    grad_out: &Tensor,
    spec: ConvSpec,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads> {
    let g = conv_geometry(input, weight, None, spec)?;
    if grad_out.shape() != [g.b, g.cout, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let (s, p) = (spec.stride, spec.padding);
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gi = if need_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if need_weight { vec![0.0; wt.len()] } else { Vec::new() };

    if need_input || need_weight {
        for bi in 0..g.b {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let gsrc = &go[(bi * g.cout + oc) * plane_out..][..plane_out];
                for icl in 0..g.cin_g {
                    let ic = grp * g.cin_g + icl;
                    let in_off = (bi * g.cin + ic) * plane_in;
                    let wbase = (oc * g.cin_g + icl) * g.k * g.k;
                    for kh in 0..g.k {
                        let (oh0, oh1) = valid_range(kh, p, s, g.h, g.ho);
                        for kw in 0..g.k {
                            let (ow0, ow1) = valid_range(kw, p, s, g.w, g.wo);
                            let wv = wt[wbase + kh * g.k + kw];
                            let mut acc = 0.0;
                            for oh in oh0..oh1 {
                                let ih = oh * s + kh - p;
                                let grow = &gsrc[oh * g.wo..][..g.wo];
                                let rbase = in_off + ih * g.w;
                                for ow in ow0..ow1 {
                                    let iw = ow * s + kw - p;
                                    let gv = grow[ow];
                                    if need_weight {
                                        acc += gv * x[rbase + iw];
                                    }
                                    if need_input {
                                        gi[rbase + iw] += wv * gv;
                                    }
                                }
                            }
                            if need_weight {
                                gw[wbase + kh * g.k + kw] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    let bias = has_bias.then(|| {
        let mut gb = vec![0.0; g.cout];
        for bi in 0..g.b {
            for (oc, gbv) in gb.iter_mut().enumerate() {
                *gbv += go[(bi * g.cout + oc) * plane_out..][..plane_out].iter().sum::<f64>();
            }
        }
        Tensor::new(vec![g.cout], gb).expect("bias shape")
    });

    Ok(ConvGrads {
        input: need_input.then(|| Tensor::new(input.shape().to_vec(), gi).expect("input shape")),
        weight: need_weight.then(|| Tensor::new(weight.shape().to_vec(), gw).expect("weight shape")),
        bias,
    })
}

/// Per-(sample, group) statistics saved by the forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormSaved {
    pub normalized: Tensor,
    pub rstd: Vec<f64>,
}

fn check_group_norm(input: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    const OP: &str = "group_norm";
    let (b, c, h, w) = input.dims4(OP)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(OP, format!("num_groups={groups} must divide channels={c}")));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(OP, format!("affine params must be [{c}]")));
    }
    Ok((b, c, h * w))
}

/// Group normalization followed by a per-channel affine transform.
pub fn group_norm_forward(
    input: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, GroupNormSaved)> {
    if eps <= 0.0 {
        return Err(Error::invalid("group_norm", "eps must be positive"));
    }
    let (b, c, hw) = check_group_norm(input, groups, gamma, beta)?;
    let cpg = c / groups;
    let n = (cpg * hw) as f64;
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstds = Vec::with_capacity(b * groups);
    for bi in 0..b {
        for gi in 0..groups {
            let off = (bi * c + gi * cpg) * hw;
            let seg = &x[off..off + cpg * hw];
            let rough = seg.iter().sum::<f64>() / n;
            let mean = rough + seg.iter().map(|v| v - rough).sum::<f64>() / n;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            for cl in 0..cpg {
                let ch = gi * cpg + cl;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for j in 0..hw {
                    let idx = off + cl * hw + j;
                    let xn = (x[idx] - mean) * rstd;
                    xhat[idx] = xn;
                    out[idx] = xn * ga + be;
                }
            }
        }
    }
    let shape = input.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), out)?,
        GroupNormSaved {
            normalized: Tensor::new(shape, xhat)?,
            rstd: rstds,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn group_norm_backward(
    saved: &GroupNormSaved,
    groups: usize,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = grad_out.dims4("group_norm_backward")?;
    let hw = h * w;
    let cpg = c / groups;
    let n = (cpg * hw) as f64;
    let xhat = saved.normalized.data();
    let dy = grad_out.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for bi in 0..b {
        for gi in 0..groups {
            let off = (bi * c + gi * cpg) * hw;
            let rstd = saved.rstd[bi * groups + gi];
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for cl in 0..cpg {
                let ch = gi * cpg + cl;
                let ga = gamma.data()[ch];
                for j in 0..hw {
                    let idx = off + cl * hw + j;
                    dgamma[ch] += dy[idx] * xhat[idx];
                    dbeta[ch] += dy[idx];
                    let d = dy[idx] * ga;
                    sum_dxhat += d;
                    sum_dxhat_xhat += d * xhat[idx];
                }
            }
            for cl in 0..cpg {
                let ga = gamma.data()[gi * cpg + cl];
                for j in 0..hw {
                    let idx = off + cl * hw + j;
                    let d = dy[idx] * ga;
                    dx[idx] = rstd / n * (n * d - sum_dxhat - xhat[idx] * sum_dxhat_xhat);
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Space-to-depth: `[B, C, H, W]` to `[B, C·p², H/p, W/p]`.
///
/// Output channel `c·p² + dy·p + dx` holds input pixel `(y·p + dy, x·p + dx)`
/// of channel `c`.
pub fn patchify(input: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4("patchify")?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid("patchify", format!("patch {p} must divide {h}x{w}")));
    }
    let (ho, wo) = (h / p, w / p);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * p * p + (y % p) * p + (xx % p);
                    let dst = ((bi * c * p * p + oc) * ho + y / p) * wo + xx / p;
                    out[dst] = x[((bi * c + ci) * h + y) * w + xx];
                }
            }
        }
    }
    Tensor::new(vec![b, c * p * p, ho, wo], out)
}

/// Depth-to-space, the exact inverse of [`patchify`].
pub fn unpatchify(input: &Tensor, p: usize) -> Result<Tensor> {
    let (b, cp, ho, wo) = input.dims4("unpatchify")?;
    if p == 0 || cp % (p * p) != 0 {
        return Err(Error::invalid("unpatchify", format!("channels {cp} not divisible by {p}²")));
    }
    let c = cp / (p * p);
    let (h, w) = (ho * p, wo * p);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let oc = ci * p * p + (y % p) * p + (xx % p);
                    let src = ((bi * cp + oc) * ho + y / p) * wo + xx / p;
                    out[((bi * c + ci) * h + y) * w + xx] = x[src];
                }
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct, unoptimized evaluation of the cross-correlation definition.
    fn conv_reference(x: &Tensor, wt: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Tensor {
        let (b, cin, h, w) = x.dims4("ref").unwrap();
        let (cout, cin_g, k, _) = (wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]);
        let cout_g = cout / spec.groups;
        let ho = (h + 2 * spec.padding - k) / spec.stride + 1;
        let wo = (w + 2 * spec.padding - k) / spec.stride + 1;
        let _ = cin;
        Tensor::from_fn(&[b, cout, ho, wo], |idx| {
            let ow = idx % wo;
            let oh = (idx / wo) % ho;
            let oc = (idx / (wo * ho)) % cout;
            let bi = idx / (wo * ho * cout);
            let grp = oc / cout_g;
            let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                for kh in 0..k {
                    for kw in 0..k {
                        let ih = (oh * spec.stride + kh) as isize - spec.padding as isize;
                        let iw = (ow * spec.stride + kw) as isize - spec.padding as isize;
                        if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                            continue;
                        }
                        let xv = x.data()[((bi * x.shape()[1] + ic) * h + ih as usize) * w + iw as usize];
                        acc += wt.data()[((oc * cin_g + icl) * k + kh) * k + kw] * xv;
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn all_ones_five_by_five_over_three_by_three() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 5, 5]);
        let y = conv2d_forward(&x, &w, None, ConvSpec::same(5, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn identity_kernel() {
        let x = pseudo(&[2, 1, 4, 5], 3);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let spec = ConvSpec { groups: 1, stride: 1, padding: 0 };
        assert_eq!(conv2d_forward(&x, &w, None, spec).unwrap(), x);
    }

    #[test]
    fn matches_reference_for_groups_strides_and_padding() {
        for &(cin, cout, groups, k, stride, pad) in
            &[(4, 8, 2, 3, 1, 1), (4, 4, 4, 5, 1, 2), (6, 3, 3, 3, 2, 1), (2, 4, 1, 5, 1, 2), (3, 3, 1, 3, 2, 0)]
        {
            let x = pseudo(&[2, cin, 7, 6], 11);
            let w = pseudo(&[cout, cin / groups, k, k], 12);
            let b = pseudo(&[cout], 13);
            let spec = ConvSpec { groups, stride, padding: pad };
            let got = conv2d_forward(&x, &w, Some(&b), spec).unwrap();
            let want = conv_reference(&x, &w, Some(&b), spec);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_bad_groups() {
        let x = Tensor::ones(&[1, 3, 4, 4]);
        let w = Tensor::ones(&[4, 1, 3, 3]);
        let err = conv2d_forward(&x, &w, None, ConvSpec::same(3, 2)).unwrap_err();
        assert!(err.to_string().contains("groups"));
    }

    #[test]
    fn group_norm_collapses_constants() {
        let x = Tensor::full(&[2, 4, 3, 3], 1.7);
        let (y, _) = group_norm_forward(&x, 2, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_zero_gamma_gives_shift() {
        let x = pseudo(&[2, 4, 3, 3], 5);
        let (y, _) = group_norm_forward(&x, 2, &Tensor::zeros(&[4]), &Tensor::full(&[4], 0.3), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn group_norm_moments() {
        let x = pseudo(&[3, 8, 5, 4], 9);
        let (_, saved) = group_norm_forward(&x, 4, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-5).unwrap();
        let n = 2 * 5 * 4;
        for seg in saved.normalized.data().chunks(n) {
            let mean = seg.iter().sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-10);
            // eps shifts the variance by eps/(var+eps), at most ~3e-4 here
            assert!((var - 1.0).abs() < 1e-3);
        }
        let (_, tight) = group_norm_forward(&x, 4, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), 1e-12).unwrap();
        for seg in tight.normalized.data().chunks(n) {
            let mean = seg.iter().sum::<f64>() / n as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_shapes_and_identity() {
        let x = pseudo(&[1, 1, 64, 64], 1);
        assert_eq!(patchify(&x, 2).unwrap().shape(), &[1, 4, 32, 32]);
        assert_eq!(patchify(&x, 1).unwrap(), x);
        assert!(patchify(&pseudo(&[1, 1, 6, 6], 1), 4).is_err());
    }

    proptest::proptest! {
        #[test]
        fn unpatchify_inverts_patchify(seed in 0u64..1000, p in proptest::sample::select(vec![1usize, 2, 4]), c in 1usize..3) {
            let x = pseudo(&[2, c, 8, 16], seed);
            let y = unpatchify(&patchify(&x, p).unwrap(), p).unwrap();
            proptest::prop_assert_eq!(y, x);
        }
    }
}
