//! Layer graph with explicit forward caches and reverse-mode gradients.
//!
//! Nodes only describe structure; parameters live in one flat `f64` slice
//! per network component and each parametrised node records its offset.
//! Conv weights are laid out `[out][in / groups][kh][kw]` followed by the
//! optional bias, affine layers as `scale[c]` then `shift[c]`, linear layers
//! as `[out][in]` then `bias[out]`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
    pub bias: bool,
    pub offset: usize,
}

impl Conv {
    pub fn weight_len(&self) -> usize {
        self.out_c * (self.in_c / self.groups) * self.kh * self.kw
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + if self.bias { self.out_c } else { 0 }
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        pooled_len(h, self.kh, self.stride, self.ph).zip(pooled_len(w, self.kw, self.stride, self.pw))
    }
}

fn pooled_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad >= k).then(|| (n + 2 * pad - k) / stride + 1)
}

/// Output indices `o` in `[lo, hi)` for which `o * s + k - pad` is a valid
/// input index.
#[inline]
fn valid_range(k: usize, pad: usize, s: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
    let top = n_in + pad;
    if top <= k {
        return (0, 0);
    }
    let hi = ((top - k - 1) / s + 1).min(n_out);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Conv(Conv),
    /// Per-channel `x * scale + shift`; stands where batch norm sits in the
    /// reference architectures and has the same parameter count.
    Affine { channels: usize, offset: usize },
    Relu,
    Relu6,
    MaxPool { k: usize, stride: usize, pad: usize },
    /// Average pool counting padded cells in the divisor.
    AvgPool { k: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    Linear { in_f: usize, out_f: usize, offset: usize },
    Seq(Vec<Node>),
    /// `body(x) + shortcut(x)`, identity shortcut when `None`.
    Residual { body: Box<Node>, shortcut: Option<Box<Node>> },
    /// Channel-wise concatenation of branches evaluated on the same input.
    Concat(Vec<Node>),
}

#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Input(Tensor),
    Output(Tensor),
    MaxIdx { idx: Vec<usize>, shape: (usize, usize, usize) },
    Shape((usize, usize, usize)),
    Seq(Vec<Cache>),
    Residual(Box<Cache>, Option<Box<Cache>>),
    Concat(Vec<Cache>, Vec<usize>),
}

impl Node {
    pub fn param_count(&self) -> usize {
        match self {
            Node::Conv(c) => c.param_len(),
            Node::Affine { channels, .. } => 2 * channels,
            Node::Linear { in_f, out_f, .. } => in_f * out_f + out_f,
            Node::Seq(v) | Node::Concat(v) => v.iter().map(Node::param_count).sum(),
            Node::Residual { body, shortcut } => {
                body.param_count() + shortcut.as_ref().map_or(0, |s| s.param_count())
            }
            _ => 0,
        }
    }

    pub fn out_shape(&self, s: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = s;
        let bad = |what: &str| Error::Shape(format!("{what} cannot take input {c}x{h}x{w}"));
        Ok(match self {
            Node::Conv(l) => {
                if c != l.in_c {
                    return Err(bad(&format!("conv expecting {} channels", l.in_c)));
                }
                let (oh, ow) = l.out_hw(h, w).ok_or_else(|| bad("conv"))?;
                (l.out_c, oh, ow)
            }
            Node::Affine { channels, .. } => {
                if c != *channels {
                    return Err(bad("affine"));
                }
                s
            }
            Node::Relu | Node::Relu6 => s,
            Node::MaxPool { k, stride, pad } | Node::AvgPool { k, stride, pad } => {
                let oh = pooled_len(h, *k, *stride, *pad).ok_or_else(|| bad("pool"))?;
                let ow = pooled_len(w, *k, *stride, *pad).ok_or_else(|| bad("pool"))?;
                (c, oh, ow)
            }
            Node::GlobalAvgPool => (c, 1, 1),
            Node::Linear { in_f, out_f, .. } => {
                if c * h * w != *in_f {
                    return Err(bad("linear"));
                }
                (*out_f, 1, 1)
            }
            Node::Seq(v) => {
                let mut cur = s;
                for n in v {
                    cur = n.out_shape(cur)?;
                }
                cur
            }
            Node::Residual { body, shortcut } => {
                let a = body.out_shape(s)?;
                let b = match shortcut {
                    Some(sc) => sc.out_shape(s)?,
                    None => s,
                };
                if a != b {
                    return Err(bad("residual branches disagree"));
                }
                a
            }
            Node::Concat(v) => {
                let mut total = 0;
                let mut hw = None;
                for n in v {
                    let (bc, bh, bw) = n.out_shape(s)?;
                    if *hw.get_or_insert((bh, bw)) != (bh, bw) {
                        return Err(bad("concat branches disagree"));
                    }
                    total += bc;
                }
                let (oh, ow) = hw.ok_or_else(|| bad("empty concat"))?;
                (total, oh, ow)
            }
        })
    }

    /// Forward pass. With `train` set the returned cache holds what the
    /// backward pass needs; otherwise it is `Cache::None`.
    pub fn forward(&self, p: &[f64], x: Tensor, train: bool) -> (Tensor, Cache) {
        match self {
            Node::Conv(l) => {
                let y = conv_forward(l, p, &x);
                (y, if train { Cache::Input(x) } else { Cache::None })
            }
            Node::Affine { channels, offset } => {
                let mut y = x.clone();
                let n = y.h * y.w;
                for ch in 0..*channels {
                    let (sc, sh) = (p[offset + ch], p[offset + channels + ch]);
                    for v in &mut y.data[ch * n..(ch + 1) * n] {
                        *v = *v * sc + sh;
                    }
                }
                (y, if train { Cache::Input(x) } else { Cache::None })
            }
            Node::Relu | Node::Relu6 => {
                let hi = if matches!(self, Node::Relu6) { 6.0 } else { f64::INFINITY };
                let mut y = x;
                for v in &mut y.data {
                    *v = v.clamp(0.0, hi);
                }
                let cache = if train { Cache::Output(y.clone()) } else { Cache::None };
                (y, cache)
            }
            Node::MaxPool { k, stride, pad } => {
                let (y, idx) = maxpool_forward(&x, *k, *stride, *pad);
                let cache = if train {
                    Cache::MaxIdx { idx, shape: x.shape() }
                } else {
                    Cache::None
                };
                (y, cache)
            }
            Node::AvgPool { k, stride, pad } => {
                let y = avgpool_forward(&x, *k, *stride, *pad);
                (y, if train { Cache::Shape(x.shape()) } else { Cache::None })
            }
            Node::GlobalAvgPool => {
                let n = (x.h * x.w) as f64;
                let data = (0..x.c).map(|ch| x.plane(ch).iter().sum::<f64>() / n).collect();
                let y = Tensor::from_vec(x.c, 1, 1, data);
                (y, if train { Cache::Shape(x.shape()) } else { Cache::None })
            }
            Node::Linear { in_f, out_f, offset } => {
                let wts = &p[*offset..offset + in_f * out_f];
                let bias = &p[offset + in_f * out_f..offset + in_f * out_f + out_f];
                let data = (0..*out_f)
                    .map(|o| {
                        let row = &wts[o * in_f..(o + 1) * in_f];
                        bias[o] + row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                let y = Tensor::from_vec(*out_f, 1, 1, data);
                (y, if train { Cache::Input(x) } else { Cache::None })
            }
            Node::Seq(nodes) => {
                let mut cur = x;
                let mut caches = Vec::with_capacity(if train { nodes.len() } else { 0 });
                for n in nodes {
                    let (y, c) = n.forward(p, cur, train);
                    if train {
                        caches.push(c);
                    }
                    cur = y;
                }
                (cur, if train { Cache::Seq(caches) } else { Cache::None })
            }
            Node::Residual { body, shortcut } => {
                let (sc_out, sc_cache) = match shortcut {
                    Some(sc) => {
                        let (y, c) = sc.forward(p, x.clone(), train);
                        (y, Some(Box::new(c)))
                    }
                    None => (x.clone(), None),
                };
                let (mut y, body_cache) = body.forward(p, x, train);
                y.add_assign(&sc_out);
                let cache = if train {
                    Cache::Residual(Box::new(body_cache), sc_cache)
                } else {
                    Cache::None
                };
                (y, cache)
            }
            Node::Concat(branches) => {
                let mut outs = Vec::with_capacity(branches.len());
                let mut caches = Vec::new();
                for b in branches {
                    let (y, c) = b.forward(p, x.clone(), train);
                    if train {
                        caches.push(c);
                    }
                    outs.push(y);
                }
                let (h, w) = (outs[0].h, outs[0].w);
                let widths: Vec<usize> = outs.iter().map(|t| t.c).collect();
                let mut data = Vec::with_capacity(widths.iter().sum::<usize>() * h * w);
                for t in outs {
                    data.extend_from_slice(&t.data);
                }
                let y = Tensor::from_vec(widths.iter().sum(), h, w, data);
                (y, if train { Cache::Concat(caches, widths) } else { Cache::None })
            }
        }
    }

    /// Propagates `g` (gradient w.r.t. this node's output) back to the input,
    /// accumulating parameter gradients into `grads` (same layout as params).
    pub fn backward(&self, p: &[f64], cache: &Cache, g: Tensor, grads: &mut [f64]) -> Tensor {
        match (self, cache) {
            (Node::Conv(l), Cache::Input(x)) => conv_backward(l, p, x, &g, grads),
            (Node::Affine { channels, offset }, Cache::Input(x)) => {
                let n = x.h * x.w;
                let mut gx = g;
                for ch in 0..*channels {
                    let sc = p[offset + ch];
                    let (mut dsc, mut dsh) = (0.0, 0.0);
                    let xs = &x.data[ch * n..(ch + 1) * n];
                    for (gv, xv) in gx.data[ch * n..(ch + 1) * n].iter_mut().zip(xs) {
                        dsc += *gv * xv;
                        dsh += *gv;
                        *gv *= sc;
                    }
                    grads[offset + ch] += dsc;
                    grads[offset + channels + ch] += dsh;
                }
                gx
            }
            (Node::Relu | Node::Relu6, Cache::Output(y)) => {
                let hi = if matches!(self, Node::Relu6) { 6.0 } else { f64::INFINITY };
                let mut gx = g;
                for (gv, &yv) in gx.data.iter_mut().zip(&y.data) {
                    if !(yv > 0.0 && yv < hi) {
                        *gv = 0.0;
                    }
                }
                gx
            }
            (Node::MaxPool { .. }, Cache::MaxIdx { idx, shape }) => {
                let mut gx = Tensor::zeros(shape.0, shape.1, shape.2);
                for (gv, &i) in g.data.iter().zip(idx) {
                    gx.data[i] += gv;
                }
                gx
            }
            (Node::AvgPool { k, stride, pad }, Cache::Shape(shape)) => {
                avgpool_backward(&g, *shape, *k, *stride, *pad)
            }
            (Node::GlobalAvgPool, Cache::Shape((c, h, w))) => {
                let n = h * w;
                let mut gx = Tensor::zeros(*c, *h, *w);
                for ch in 0..*c {
                    let v = g.data[ch] / n as f64;
                    gx.data[ch * n..(ch + 1) * n].fill(v);
                }
                gx
            }
            (Node::Linear { in_f, out_f, offset }, Cache::Input(x)) => {
                let wlen = in_f * out_f;
                let mut gx = Tensor::zeros(x.c, x.h, x.w);
                for o in 0..*out_f {
                    let go = g.data[o];
                    grads[offset + wlen + o] += go;
                    if go == 0.0 {
                        continue;
                    }
                    let row = &p[offset + o * in_f..offset + (o + 1) * in_f];
                    let grow = &mut grads[offset + o * in_f..offset + (o + 1) * in_f];
                    for i in 0..*in_f {
                        grow[i] += go * x.data[i];
                        gx.data[i] += go * row[i];
                    }
                }
                gx
            }
            (Node::Seq(nodes), Cache::Seq(caches)) => {
                let mut cur = g;
                for (n, c) in nodes.iter().zip(caches).rev() {
                    cur = n.backward(p, c, cur, grads);
                }
                cur
            }
            (Node::Residual { body, shortcut }, Cache::Residual(bc, sc)) => {
                let mut gx = body.backward(p, bc, g.clone(), grads);
                match (shortcut, sc) {
                    (Some(s), Some(c)) => gx.add_assign(&s.backward(p, c, g, grads)),
                    _ => gx.add_assign(&g),
                }
                gx
            }
            (Node::Concat(branches), Cache::Concat(caches, widths)) => {
                let n = g.h * g.w;
                let mut start = 0;
                let mut gx: Option<Tensor> = None;
                for ((b, c), &wd) in branches.iter().zip(caches).zip(widths) {
                    let part = Tensor::from_vec(wd, g.h, g.w, g.data[start * n..(start + wd) * n].to_vec());
                    start += wd;
                    let gi = b.backward(p, c, part, grads);
                    match gx.as_mut() {
                        Some(acc) => acc.add_assign(&gi),
                        None => gx = Some(gi),
                    }
                }
                gx.expect("concat has branches")
            }
            _ => panic!("backward called with a cache from a different node or inference pass"),
        }
    }
}

fn conv_forward(l: &Conv, p: &[f64], x: &Tensor) -> Tensor {
    let (oh, ow) = l.out_hw(x.h, x.w).expect("conv input too small");
    let (h, w) = (x.h, x.w);
    let cin_g = l.in_c / l.groups;
    let cout_g = l.out_c / l.groups;
    let wts = &p[l.offset..l.offset + l.weight_len()];
    let mut out = Tensor::zeros(l.out_c, oh, ow);
    let on = oh * ow;
    let pointwise = l.kh == 1 && l.kw == 1 && l.stride == 1 && l.ph == 0 && l.pw == 0;

    for g in 0..l.groups {
        for ocl in 0..cout_g {
            let oc = g * cout_g + ocl;
            let oplane = &mut out.data[oc * on..(oc + 1) * on];
            for icl in 0..cin_g {
                let iplane = x.plane(g * cin_g + icl);
                let wbase = (oc * cin_g + icl) * l.kh * l.kw;
                if pointwise {
                    let wv = wts[wbase];
                    for (o, i) in oplane.iter_mut().zip(iplane) {
                        *o += wv * i;
                    }
                    continue;
                }
                for ky in 0..l.kh {
                    let (oy0, oy1) = valid_range(ky, l.ph, l.stride, h, oh);
                    for kx in 0..l.kw {
                        let (ox0, ox1) = valid_range(kx, l.pw, l.stride, w, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = wts[wbase + ky * l.kw + kx];
                        for oy in oy0..oy1 {
                            let iy = oy * l.stride + ky - l.ph;
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            let irow = &iplane[iy * w..(iy + 1) * w];
                            if l.stride == 1 {
                                let ix0 = ox0 + kx - l.pw;
                                for (o, i) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * l.stride + kx - l.pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if l.bias {
        let b = &p[l.offset + l.weight_len()..l.offset + l.param_len()];
        for (oc, bv) in b.iter().enumerate() {
            for v in &mut out.data[oc * on..(oc + 1) * on] {
                *v += bv;
            }
        }
    }
    out
}

fn conv_backward(l: &Conv, p: &[f64], x: &Tensor, g: &Tensor, grads: &mut [f64]) -> Tensor {
    let (h, w) = (x.h, x.w);
    let (oh, ow) = (g.h, g.w);
    let cin_g = l.in_c / l.groups;
    let cout_g = l.out_c / l.groups;
    let wlen = l.weight_len();
    let on = oh * ow;
    let inn = h * w;
    let mut gx = Tensor::zeros(x.c, h, w);
    let pointwise = l.kh == 1 && l.kw == 1 && l.stride == 1 && l.ph == 0 && l.pw == 0;

    for g_i in 0..l.groups {
        for ocl in 0..cout_g {
            let oc = g_i * cout_g + ocl;
            let gplane = &g.data[oc * on..(oc + 1) * on];
            if l.bias {
                grads[l.offset + wlen + oc] += gplane.iter().sum::<f64>();
            }
            for icl in 0..cin_g {
                let ic = g_i * cin_g + icl;
                let iplane = x.plane(ic);
                let giplane = &mut gx.data[ic * inn..(ic + 1) * inn];
                let wbase = (oc * cin_g + icl) * l.kh * l.kw;
                if pointwise {
                    let wv = p[l.offset + wbase];
                    let mut acc = 0.0;
                    for ((gv, iv), gi) in gplane.iter().zip(iplane).zip(giplane.iter_mut()) {
                        acc += gv * iv;
                        *gi += wv * gv;
                    }
                    grads[l.offset + wbase] += acc;
                    continue;
                }
                for ky in 0..l.kh {
                    let (oy0, oy1) = valid_range(ky, l.ph, l.stride, h, oh);
                    for kx in 0..l.kw {
                        let (ox0, ox1) = valid_range(kx, l.pw, l.stride, w, ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let widx = l.offset + wbase + ky * l.kw + kx;
                        let wv = p[widx];
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * l.stride + ky - l.ph;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let irow = &iplane[iy * w..(iy + 1) * w];
                            let girow = &mut giplane[iy * w..(iy + 1) * w];
                            if l.stride == 1 {
                                let ix0 = ox0 + kx - l.pw;
                                let n = ox1 - ox0;
                                for ((gv, iv), gi) in grow[ox0..ox1]
                                    .iter()
                                    .zip(&irow[ix0..ix0 + n])
                                    .zip(&mut girow[ix0..ix0 + n])
                                {
                                    acc += gv * iv;
                                    *gi += wv * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * l.stride + kx - l.pw;
                                    acc += grow[ox] * irow[ix];
                                    girow[ix] += wv * grow[ox];
                                }
                            }
                        }
                        grads[widx] += acc;
                    }
                }
            }
        }
    }
    gx
}

fn maxpool_forward(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Tensor, Vec<usize>) {
    let oh = pooled_len(x.h, k, stride, pad).expect("pool input too small");
    let ow = pooled_len(x.w, k, stride, pad).expect("pool input too small");
    let mut y = Tensor::zeros(x.c, oh, ow);
    let mut idx = vec![0usize; x.c * oh * ow];
    for c in 0..x.c {
        let plane = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let i = iy as usize * x.w + ix as usize;
                        if plane[i] > best {
                            best = plane[i];
                            arg = i;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                y.data[o] = best;
                idx[o] = c * x.h * x.w + arg;
            }
        }
    }
    (y, idx)
}

fn avgpool_forward(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let oh = pooled_len(x.h, k, stride, pad).expect("pool input too small");
    let ow = pooled_len(x.w, k, stride, pad).expect("pool input too small");
    let div = (k * k) as f64;
    let mut y = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let plane = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            acc += plane[iy as usize * x.w + ix as usize];
                        }
                    }
                }
                y.data[(c * oh + oy) * ow + ox] = acc / div;
            }
        }
    }
    y
}

fn avgpool_backward(g: &Tensor, shape: (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = shape;
    let div = (k * k) as f64;
    let mut gx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for oy in 0..g.h {
            for ox in 0..g.w {
                let gv = g.data[(ch * g.h + oy) * g.w + ox] / div;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gx.data[(ch * h + iy as usize) * w + ix as usize] += gv;
                        }
                    }
                }
            }
        }
    }
    gx
}
