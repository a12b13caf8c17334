//! Token-span layout of the policy sequence and its attention mask.

use std::rc::Rc;

use moth_tensor::{Scalar, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpanKind {
    Img,
    Txt,
    Traj3d,
    Mano,
    Action,
}

impl SpanKind {
    pub const ALL: [SpanKind; 5] = [
        SpanKind::Img,
        SpanKind::Txt,
        SpanKind::Traj3d,
        SpanKind::Mano,
        SpanKind::Action,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn owner(self) -> Expert {
        match self {
            SpanKind::Img | SpanKind::Txt | SpanKind::Traj3d => Expert::Vl,
            SpanKind::Mano => Expert::Intention,
            SpanKind::Action => Expert::Fine,
        }
    }
}

/// The three experts, ordered upstream to downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Expert {
    Vl,
    Intention,
    Fine,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Vl, Expert::Intention, Expert::Fine];

    /// Parameter-name prefix of the expert.
    pub fn prefix(self) -> &'static str {
        match self {
            Expert::Vl => "vl.",
            Expert::Intention => "int.",
            Expert::Fine => "fine.",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.end()
    }
}

/// Span lengths plus which of the three chunk spans are present.
///
/// Prefix-only layouts (inference of an upstream stage) and ablations drop
/// spans entirely; a present span always has its full length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpanLayout {
    pub n_img: usize,
    pub n_txt: usize,
    pub horizon: usize,
    pub traj3d: bool,
    pub mano: bool,
    pub action: bool,
}

impl SpanLayout {
    /// All five spans.
    pub fn full(n_img: usize, n_txt: usize, horizon: usize) -> Result<Self> {
        let l = SpanLayout {
            n_img,
            n_txt,
            horizon,
            traj3d: true,
            mano: true,
            action: true,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_img == 0 || self.n_txt == 0 {
            return Err(Error::Layout(format!(
                "prefix spans must be non-empty (n_img={}, n_txt={})",
                self.n_img, self.n_txt
            )));
        }
        if (self.traj3d || self.mano || self.action) && self.horizon == 0 {
            return Err(Error::Layout("chunk spans need horizon >= 1".into()));
        }
        Ok(())
    }

    pub fn has(&self, kind: SpanKind) -> bool {
        match kind {
            SpanKind::Img | SpanKind::Txt => true,
            SpanKind::Traj3d => self.traj3d,
            SpanKind::Mano => self.mano,
            SpanKind::Action => self.action,
        }
    }

    fn len_of(&self, kind: SpanKind) -> usize {
        match kind {
            SpanKind::Img => self.n_img,
            SpanKind::Txt => self.n_txt,
            _ => self.horizon,
        }
    }

    /// Present spans in sequence order.
    pub fn spans(&self) -> Vec<Span> {
        let mut start = 0;
        let mut out = Vec::with_capacity(5);
        for kind in SpanKind::ALL {
            if self.has(kind) {
                let len = self.len_of(kind);
                out.push(Span { kind, start, len });
                start += len;
            }
        }
        out
    }

    pub fn span(&self, kind: SpanKind) -> Option<Span> {
        self.spans().into_iter().find(|s| s.kind == kind)
    }

    pub fn total(&self) -> usize {
        self.spans().iter().map(|s| s.len).sum()
    }

    pub fn kind_at(&self, pos: usize) -> Option<SpanKind> {
        self.spans().into_iter().find(|s| s.contains(pos)).map(|s| s.kind)
    }

    /// Span kind of every position.
    pub fn kinds(&self) -> Vec<SpanKind> {
        self.spans()
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.kind, s.len))
            .collect()
    }

    /// Contiguous `(start, len)` rows owned by `expert`, if any.
    pub fn expert_rows(&self, expert: Expert) -> Option<(usize, usize)> {
        let owned: Vec<Span> = self
            .spans()
            .into_iter()
            .filter(|s| s.kind.owner() == expert)
            .collect();
        let first = owned.first()?;
        let last = owned.last()?;
        Some((first.start, last.end() - first.start))
    }

    /// Same layout with every span after `kind` removed.
    pub fn truncated_after(&self, kind: SpanKind) -> SpanLayout {
        let mut l = self.clone();
        if kind < SpanKind::Traj3d {
            l.traj3d = false;
        }
        if kind < SpanKind::Mano {
            l.mano = false;
        }
        if kind < SpanKind::Action {
            l.action = false;
        }
        l
    }
}

/// Square boolean matrix; `allows(q, k)` is true iff query `q` may attend key `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    cells: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.cells[q * self.n + k]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Rows `[row_start, row_start + rows)` restricted to keys `[0, keys)`.
    pub fn block(&self, row_start: usize, rows: usize, keys: usize) -> Rc<[bool]> {
        (row_start..row_start + rows)
            .flat_map(|q| self.cells[q * self.n..q * self.n + keys].iter().copied())
            .collect()
    }

    /// Hide the given key positions from every query.
    pub fn mask_keys(&mut self, keys: &[usize]) -> Result<()> {
        for &k in keys {
            if k >= self.n {
                return Err(Error::Layout(format!("key {k} outside mask of size {}", self.n)));
            }
            for q in 0..self.n {
                self.cells[q * self.n + k] = false;
            }
        }
        for q in 0..self.n {
            if !self.cells[q * self.n..(q + 1) * self.n].iter().any(|&c| c) {
                return Err(Error::Layout(format!("query {q} has no visible key")));
            }
        }
        Ok(())
    }
}

/// Prefix spans are bidirectional among themselves, the waypoint and hand
/// spans see every earlier span and are causal inside, and the action span
/// sees everything before it and all of itself.
pub fn build_mask(layout: &SpanLayout) -> Result<AttentionMask> {
    layout.validate()?;
    let kinds = layout.kinds();
    let n = kinds.len();
    let mut cells = vec![false; n * n];
    for (q, &kq) in kinds.iter().enumerate() {
        for (k, &kk) in kinds.iter().enumerate() {
            cells[q * n + k] = match kq {
                SpanKind::Img | SpanKind::Txt => kk <= SpanKind::Txt,
                SpanKind::Traj3d | SpanKind::Mano => kk < kq || (kk == kq && k <= q),
                SpanKind::Action => true,
            };
        }
    }
    Ok(AttentionMask { n, cells })
}

/// Concatenate per-span blocks in layout order and add span-type and
/// position embeddings. `type_emb` has one row per [`SpanKind`], `pos_emb`
/// at least `layout.total()` rows.
pub fn assemble<T: Scalar>(
    tape: &mut Tape<'_, T>,
    layout: &SpanLayout,
    blocks: &[Var],
    type_emb: Var,
    pos_emb: Var,
) -> Result<Var> {
    let spans = layout.spans();
    if blocks.len() != spans.len() {
        return Err(Error::Layout(format!(
            "{} blocks for {} spans",
            blocks.len(),
            spans.len()
        )));
    }
    let width = tape.shape(type_emb)[1];
    for (span, &b) in spans.iter().zip(blocks) {
        let shape = tape.shape(b);
        if shape != [span.len, width] {
            return Err(Error::Layout(format!(
                "{:?} block has shape {:?}, span needs [{}, {}]",
                span.kind, shape, span.len, width
            )));
        }
    }
    let x = tape.concat_rows(blocks)?;
    let ids: Vec<usize> = layout.kinds().iter().map(|k| k.index()).collect();
    let types = tape.embedding(type_emb, &ids)?;
    let pos = tape.slice_rows(pos_emb, 0, ids.len())?;
    let x = tape.add(x, types)?;
    Ok(tape.add(x, pos)?)
}
