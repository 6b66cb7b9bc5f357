//! Direct 3D convolution kernels shared by forward and backward passes.
//!
//! Everything is a gather over the buffer being written: workers own disjoint
//! (n, channel) slices, and per-element accumulation order is fixed, so
//! results are bitwise identical at any worker count.

use crate::threads::for_each_chunk_mut;

/// Feature-map geometry for an N×C×D×H×W buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MapDims {
    pub n: usize,
    pub c: usize,
    pub d: [usize; 3],
}

impl MapDims {
    pub fn spatial(&self) -> usize {
        self.d[0] * self.d[1] * self.d[2]
    }
    pub fn numel(&self) -> usize {
        self.n * self.c * self.spatial()
    }
}

pub(crate) fn conv_out_dim(d: usize, pad: usize, k: usize, stride: usize) -> usize {
    (d + 2 * pad - k) / stride + 1
}

pub(crate) fn conv_transpose_out_dim(
    d: usize,
    pad: usize,
    k: usize,
    stride: usize,
    outpad: usize,
) -> Option<usize> {
    ((d - 1) * stride + k + outpad).checked_sub(2 * pad).filter(|&v| v > 0)
}

/// Small-output threshold below which gathers run over precomputed tap
/// tables instead of row loops; row setup dominates tiny rows otherwise.
const TAP_TABLE_MAX_SPATIAL: usize = 4096;

/// Valid kernel taps for one output voxel: (flat kernel index, flat offset
/// into the per-channel input slice).
type VoxelTaps = Vec<(u16, u32)>;

fn build_conv_taps(
    od: MapDims,
    xd: MapDims,
    k: usize,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<VoxelTaps> {
    let (dz, dy, dx) = (xd.d[0] as isize, xd.d[1] as isize, xd.d[2] as isize);
    let mut tables = Vec::with_capacity(od.spatial());
    for oz in 0..od.d[0] {
        for oy in 0..od.d[1] {
            for ox in 0..od.d[2] {
                let mut taps = Vec::new();
                for kz in 0..k {
                    let iz = (oz * stride[0] + kz) as isize - pad[0] as isize;
                    if iz < 0 || iz >= dz {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * stride[1] + ky) as isize - pad[1] as isize;
                        if iy < 0 || iy >= dy {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride[2] + kx) as isize - pad[2] as isize;
                            if ix < 0 || ix >= dx {
                                continue;
                            }
                            taps.push((
                                ((kz * k + ky) * k + kx) as u16,
                                ((iz * dy + iy) * dx + ix) as u32,
                            ));
                        }
                    }
                }
                tables.push(taps);
            }
        }
    }
    tables
}

fn build_transpose_taps(
    od: MapDims,
    xd: MapDims,
    k: usize,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<VoxelTaps> {
    let (dz, dy, dx) = (xd.d[0], xd.d[1], xd.d[2]);
    let source = |o: usize, kk: usize, axis: usize, dim: usize| -> Option<usize> {
        let t = o as isize + pad[axis] as isize - kk as isize;
        if t < 0 || t % stride[axis] as isize != 0 {
            return None;
        }
        let i = (t / stride[axis] as isize) as usize;
        (i < dim).then_some(i)
    };
    let mut tables = Vec::with_capacity(od.spatial());
    for oz in 0..od.d[0] {
        for oy in 0..od.d[1] {
            for ox in 0..od.d[2] {
                let mut taps = Vec::new();
                for kz in 0..k {
                    let Some(iz) = source(oz, kz, 0, dz) else { continue };
                    for ky in 0..k {
                        let Some(iy) = source(oy, ky, 1, dy) else { continue };
                        for kx in 0..k {
                            let Some(ix) = source(ox, kx, 2, dx) else { continue };
                            taps.push((
                                ((kz * k + ky) * k + kx) as u16,
                                ((iz * dy + iy) * dx + ix) as u32,
                            ));
                        }
                    }
                }
                tables.push(taps);
            }
        }
    }
    tables
}

/// Tap-table gather shared by both conv directions once the tables exist.
#[allow(clippy::too_many_arguments)]
fn gather_with_taps(
    x: &[f32],
    xd: MapDims,
    w: &[f32],
    w_row_of: impl Fn(usize, usize) -> usize + Sync,
    k3: usize,
    bias: Option<&[f32]>,
    od: MapDims,
    tables: &[VoxelTaps],
    out: &mut [f32],
) {
    let x_spatial = xd.spatial();
    let o_spatial = od.spatial();
    for_each_chunk_mut(out, o_spatial, |chunk_idx, chunk| {
        let n = chunk_idx / od.c;
        let oc = chunk_idx % od.c;
        chunk.fill(bias.map_or(0.0, |b| b[oc]));
        for ic in 0..xd.c {
            let xs = &x[(n * xd.c + ic) * x_spatial..][..x_spatial];
            let wrow = &w[w_row_of(oc, ic) * k3..][..k3];
            for (o, taps) in chunk.iter_mut().zip(tables) {
                let mut acc = *o;
                for &(kidx, xoff) in taps {
                    acc += wrow[kidx as usize] * xs[xoff as usize];
                }
                *o = acc;
            }
        }
    });
}

/// out[n,oc,o] = bias[oc] + sum over ic,k of x[n,ic,o*stride-pad+k] * w[oc,ic,k].
///
/// Weight storage is [oc, ic, k, k, k]. Covers conv3d forward and, with the
/// transposed weight interpretation, the input gradient of conv_transpose3d.
pub(crate) fn conv_gather(
    x: &[f32],
    xd: MapDims,
    w: &[f32],
    k: usize,
    bias: Option<&[f32]>,
    stride: [usize; 3],
    pad: [usize; 3],
    od: MapDims,
    out: &mut [f32],
) {
    if od.spatial() <= TAP_TABLE_MAX_SPATIAL {
        let tables = build_conv_taps(od, xd, k, stride, pad);
        let ic_n = xd.c;
        gather_with_taps(
            x,
            xd,
            w,
            |oc, ic| oc * ic_n + ic,
            k * k * k,
            bias,
            od,
            &tables,
            out,
        );
        return;
    }
    let (dz, dy, dx) = (xd.d[0], xd.d[1], xd.d[2]);
    let (oz, oy, ox) = (od.d[0], od.d[1], od.d[2]);
    let x_spatial = xd.spatial();
    let o_spatial = od.spatial();
    // chunk = one (n, oc) output slice
    for_each_chunk_mut(out, o_spatial, |chunk_idx, chunk| {
        let n = chunk_idx / od.c;
        let oc = chunk_idx % od.c;
        let fill = bias.map_or(0.0, |b| b[oc]);
        chunk.fill(fill);
        for ic in 0..xd.c {
            let xbase_nc = (n * xd.c + ic) * x_spatial;
            let wbase_cc = (oc * xd.c + ic) * k * k * k;
            for o_z in 0..oz {
                for kz in 0..k {
                    let iz = (o_z * stride[0] + kz) as isize - pad[0] as isize;
                    if iz < 0 || iz >= dz as isize {
                        continue;
                    }
                    let iz = iz as usize;
                    for o_y in 0..oy {
                        for ky in 0..k {
                            let iy = (o_y * stride[1] + ky) as isize - pad[1] as isize;
                            if iy < 0 || iy >= dy as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let xrow = &x[xbase_nc + (iz * dy + iy) * dx..][..dx];
                            let wrow = &w[wbase_cc + (kz * k + ky) * k..][..k];
                            let orow = &mut chunk[(o_z * oy + o_y) * ox..][..ox];
                            accumulate_row(orow, xrow, wrow, stride[2], pad[2]);
                        }
                    }
                }
            }
        }
    });
}

/// orow[o] += sum over kx of wrow[kx] * xrow[o*stride - pad + kx], skipping
/// out-of-range taps.
#[inline]
fn accumulate_row(orow: &mut [f32], xrow: &[f32], wrow: &[f32], stride: usize, pad: usize) {
    let ox = orow.len();
    let dx = xrow.len();
    for (kx, &wv) in wrow.iter().enumerate() {
        if wv == 0.0 {
            continue;
        }
        let shift = kx as isize - pad as isize;
        // valid o: 0 <= o*stride + shift < dx
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) as usize).div_ceil(stride)
        };
        if lo >= ox || (lo * stride) as isize + shift >= dx as isize {
            continue;
        }
        let hi = (((dx as isize - 1 - shift) / stride as isize) as usize).min(ox - 1);
        if stride == 1 {
            let src = &xrow[(lo as isize + shift) as usize..][..hi - lo + 1];
            for (o, xv) in orow[lo..=hi].iter_mut().zip(src) {
                *o += wv * xv;
            }
        } else {
            for o in lo..=hi {
                orow[o] += wv * xrow[((o * stride) as isize + shift) as usize];
            }
        }
    }
}

/// out[n,oc,o] = bias[oc] + sum over ic,k with o = i*stride - pad + k of
/// x[n,ic,i] * w[ic,oc,k], i.e. the transposed convolution as a gather:
/// for output position o, taps i = (o + pad - k)/stride where divisible.
///
/// Weight storage is [ic, oc, k, k, k]. Covers conv_transpose3d forward and,
/// with storage [oc, ic, ...] read as [ic', oc', ...], the input gradient of
/// conv3d.
pub(crate) fn transpose_gather(
    x: &[f32],
    xd: MapDims,
    w: &[f32],
    w_second: usize,
    k: usize,
    bias: Option<&[f32]>,
    stride: [usize; 3],
    pad: [usize; 3],
    od: MapDims,
    out: &mut [f32],
) {
    if od.spatial() <= TAP_TABLE_MAX_SPATIAL {
        let tables = build_transpose_taps(od, xd, k, stride, pad);
        gather_with_taps(
            x,
            xd,
            w,
            |oc, ic| ic * w_second + oc,
            k * k * k,
            bias,
            od,
            &tables,
            out,
        );
        return;
    }
    let (dz, dy, dx) = (xd.d[0], xd.d[1], xd.d[2]);
    let (oz, oy, ox) = (od.d[0], od.d[1], od.d[2]);
    let x_spatial = xd.spatial();
    let o_spatial = od.spatial();
    for_each_chunk_mut(out, o_spatial, |chunk_idx, chunk| {
        let n = chunk_idx / od.c;
        let oc = chunk_idx % od.c;
        let fill = bias.map_or(0.0, |b| b[oc]);
        chunk.fill(fill);
        for ic in 0..xd.c {
            let xbase_nc = (n * xd.c + ic) * x_spatial;
            let wbase_cc = (ic * w_second + oc) * k * k * k;
            for o_z in 0..oz {
                for kz in 0..k {
                    let t = o_z as isize + pad[0] as isize - kz as isize;
                    if t < 0 || t % stride[0] as isize != 0 {
                        continue;
                    }
                    let iz = (t / stride[0] as isize) as usize;
                    if iz >= dz {
                        continue;
                    }
                    for o_y in 0..oy {
                        for ky in 0..k {
                            let t = o_y as isize + pad[1] as isize - ky as isize;
                            if t < 0 || t % stride[1] as isize != 0 {
                                continue;
                            }
                            let iy = (t / stride[1] as isize) as usize;
                            if iy >= dy {
                                continue;
                            }
                            let xrow = &x[xbase_nc + (iz * dy + iy) * dx..][..dx];
                            let wrow = &w[wbase_cc + (kz * k + ky) * k..][..k];
                            let orow = &mut chunk[(o_z * oy + o_y) * ox..][..ox];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                if wv == 0.0 {
                                    continue;
                                }
                                for o_x in 0..ox {
                                    let t = o_x as isize + pad[2] as isize - kx as isize;
                                    if t < 0 || t % stride[2] as isize != 0 {
                                        continue;
                                    }
                                    let ix = (t / stride[2] as isize) as usize;
                                    if ix < dx {
                                        orow[o_x] += wv * xrow[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// gw[cb, ca, k] += sum over n, t of strided[n, cb, t] * dense[n, ca, t*stride - pad + k].
///
/// `strided` is the map living on the strided grid (the conv output / the
/// transpose-conv input); `dense` is the fine-grid map. Both weight layouts
/// put the strided-side channel first: conv3d stores [co, ci, k...] with the
/// output gradient strided, conv_transpose3d stores [ci, co, k...] with the
/// op input strided.
pub(crate) fn weight_grad(
    dense: &[f32],
    dd: MapDims,
    strided: &[f32],
    sd: MapDims,
    k: usize,
    stride: [usize; 3],
    pad: [usize; 3],
    gw: &mut [f32],
) {
    let (dz, dy, dx) = (dd.d[0], dd.d[1], dd.d[2]);
    let (sz, sy, sx) = (sd.d[0], sd.d[1], sd.d[2]);
    let k3 = k * k * k;
    let d_spatial = dd.spatial();
    let s_spatial = sd.spatial();
    if s_spatial <= TAP_TABLE_MAX_SPATIAL {
        // same index relation as the forward gather, with the dense map in
        // the input role
        let tables = build_conv_taps(sd, dd, k, stride, pad);
        for_each_chunk_mut(gw, k3, |pair_idx, chunk| {
            let (ca, cb) = (pair_idx % dd.c, pair_idx / dd.c);
            for n in 0..dd.n {
                let ds = &dense[(n * dd.c + ca) * d_spatial..][..d_spatial];
                let ss = &strided[(n * sd.c + cb) * s_spatial..][..s_spatial];
                for (sv, taps) in ss.iter().zip(&tables) {
                    if *sv == 0.0 {
                        continue;
                    }
                    for &(kidx, doff) in taps {
                        chunk[kidx as usize] += sv * ds[doff as usize];
                    }
                }
            }
        });
        return;
    }
    // chunk = all kernel taps for one (strided-channel, dense-channel) pair
    for_each_chunk_mut(gw, k3, |pair_idx, chunk| {
        let (ca, cb) = (pair_idx % dd.c, pair_idx / dd.c);
        for n in 0..dd.n {
            let dbase = (n * dd.c + ca) * d_spatial;
            let sbase = (n * sd.c + cb) * s_spatial;
            for tz in 0..sz {
                for kz in 0..k {
                    let iz = (tz * stride[0] + kz) as isize - pad[0] as isize;
                    if iz < 0 || iz >= dz as isize {
                        continue;
                    }
                    let iz = iz as usize;
                    for ty in 0..sy {
                        for ky in 0..k {
                            let iy = (ty * stride[1] + ky) as isize - pad[1] as isize;
                            if iy < 0 || iy >= dy as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            let drow = &dense[dbase + (iz * dy + iy) * dx..][..dx];
                            let srow = &strided[sbase + (tz * sy + ty) * sx..][..sx];
                            let gwrow = &mut chunk[(kz * k + ky) * k..][..k];
                            for tx in 0..sx {
                                let sv = srow[tx];
                                if sv == 0.0 {
                                    continue;
                                }
                                for (kx, g) in gwrow.iter_mut().enumerate() {
                                    let ix = (tx * stride[2] + kx) as isize - pad[2] as isize;
                                    if ix >= 0 && ix < dx as isize {
                                        *g += sv * drow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// gb[c] += sum over n and spatial positions of g[n, c, ...].
pub(crate) fn bias_grad(g: &[f32], gd: MapDims, gb: &mut [f32]) {
    let spatial = gd.spatial();
    for n in 0..gd.n {
        for (c, acc) in gb.iter_mut().enumerate() {
            let base = (n * gd.c + c) * spatial;
            let mut s = 0.0f32;
            for v in &g[base..base + spatial] {
                s += v;
            }
            *acc += s;
        }
    }
}
