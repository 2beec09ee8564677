use std::cell::Cell;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::mem;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ParamId, ParamSet, Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Role of a buffer for memory accounting. Only activations count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufKind {
    Activation,
    Parameter,
    Constant,
}

pub(crate) struct Buffer<R> {
    data: Vec<R>,
    kind: BufKind,
    saves: Cell<u32>,
}

impl<R> Buffer<R> {
    pub(crate) fn new(data: Vec<R>, kind: BufKind) -> Self {
        Buffer { data, kind, saves: Cell::new(0) }
    }

    pub(crate) fn data(&self) -> &[R] {
        &self.data
    }

    fn bytes(&self) -> usize {
        self.data.len() * mem::size_of::<R>()
    }
}

impl<R> fmt::Debug for Buffer<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Buffer({} values, {:?})", self.data.len(), self.kind)
    }
}

#[derive(Default)]
struct LedgerCells {
    live: Cell<usize>,
    peak: Cell<usize>,
    count: Cell<usize>,
}

/// Byte ledger of activation buffers retained for backward.
///
/// A buffer is counted once no matter how many ops retain it.
#[derive(Clone, Default)]
pub struct Ledger(Rc<LedgerCells>);

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    fn retain(&self, bytes: usize) {
        let live = self.0.live.get() + bytes;
        self.0.live.set(live);
        self.0.count.set(self.0.count.get() + 1);
        if live > self.0.peak.get() {
            self.0.peak.set(live);
        }
    }

    fn release(&self, bytes: usize) {
        self.0.live.set(self.0.live.get() - bytes);
        self.0.count.set(self.0.count.get() - 1);
    }

    pub fn report(&self) -> MemoryReport {
        MemoryReport {
            peak_bytes: self.0.peak.get(),
            live_bytes: self.0.live.get(),
            retained_tensor_count: self.0.count.get(),
        }
    }

    /// Restarts peak tracking from the current live level.
    pub fn reset_peak(&self) {
        self.0.peak.set(self.0.live.get());
    }
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.report().fmt(f)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryReport {
    pub peak_bytes: usize,
    pub live_bytes: usize,
    pub retained_tensor_count: usize,
}

/// A buffer held by a recorded op for its backward rule.
pub(crate) struct Saved<R> {
    buf: Rc<Buffer<R>>,
    ledger: Ledger,
}

impl<R> Saved<R> {
    pub(crate) fn new(buf: &Rc<Buffer<R>>, ledger: &Ledger) -> Self {
        if buf.kind == BufKind::Activation {
            let n = buf.saves.get();
            if n == 0 {
                ledger.retain(buf.bytes());
            }
            buf.saves.set(n + 1);
        }
        Saved { buf: buf.clone(), ledger: ledger.clone() }
    }

    pub(crate) fn of(var: &Var<R>, ledger: &Ledger) -> Self {
        Saved::new(&var.buf, ledger)
    }

    pub(crate) fn from_vec(data: Vec<R>, ledger: &Ledger) -> Self {
        Saved::new(&Rc::new(Buffer::new(data, BufKind::Activation)), ledger)
    }

    pub(crate) fn buffer(&self) -> &Rc<Buffer<R>> {
        &self.buf
    }

    fn key(&self) -> (*const Buffer<R>, usize, BufKind) {
        (Rc::as_ptr(&self.buf), self.buf.bytes(), self.buf.kind)
    }
}

impl<R> std::ops::Deref for Saved<R> {
    type Target = [R];

    fn deref(&self) -> &[R] {
        &self.buf.data
    }
}

impl<R> Drop for Saved<R> {
    fn drop(&mut self) {
        if self.buf.kind == BufKind::Activation {
            let n = self.buf.saves.get() - 1;
            self.buf.saves.set(n);
            if n == 0 {
                self.ledger.release(self.buf.bytes());
            }
        }
    }
}

/// A value in a recorded computation.
#[derive(Clone)]
pub struct Var<R> {
    tape: u64,
    node: Option<usize>,
    shape: Vec<usize>,
    buf: Rc<Buffer<R>>,
}

impl<R: Real> Var<R> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &[R] {
        &self.buf.data
    }

    pub fn numel(&self) -> usize {
        self.buf.data.len()
    }

    /// True when gradients flow back through this value.
    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> R {
        self.buf.data[0]
    }

    pub fn to_tensor(&self) -> Tensor<R> {
        Tensor::new(self.shape.clone(), self.buf.data.clone()).expect("var shape is consistent")
    }

    pub(crate) fn buffer(&self) -> &Rc<Buffer<R>> {
        &self.buf
    }
}

impl<R: Real> fmt::Debug for Var<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("node", &self.node).field("shape", &self.shape).finish()
    }
}

/// Gradient rule of one recorded op.
pub(crate) trait BackwardOp<R: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; entries whose `needs` flag is false
    /// may be `None`.
    fn backward(self: Box<Self>, grad: &[R], needs: &[bool], acc: &mut Gradients<R>) -> Result<Vec<Option<Vec<R>>>>;

    fn visit_saved(&self, visit: &mut dyn FnMut(&Saved<R>));
}

type ClosureFn<'a, R> = dyn FnOnce(&[R], &[bool], &[Saved<R>]) -> Result<Vec<Option<Vec<R>>>> + 'a;

/// Backward rule given as a closure over the op's saved buffers.
pub(crate) struct ClosureOp<'a, R> {
    pub name: &'static str,
    pub saved: Vec<Saved<R>>,
    pub f: Box<ClosureFn<'a, R>>,
}

impl<'a, R: Real> ClosureOp<'a, R> {
    pub(crate) fn boxed(
        name: &'static str,
        saved: Vec<Saved<R>>,
        f: impl FnOnce(&[R], &[bool], &[Saved<R>]) -> Result<Vec<Option<Vec<R>>>> + 'a,
    ) -> Box<dyn BackwardOp<R> + 'a> {
        Box::new(ClosureOp { name, saved, f: Box::new(f) })
    }
}

impl<R: Real> BackwardOp<R> for ClosureOp<'_, R> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(self: Box<Self>, grad: &[R], needs: &[bool], _acc: &mut Gradients<R>) -> Result<Vec<Option<Vec<R>>>> {
        let ClosureOp { saved, f, .. } = *self;
        f(grad, needs, &saved)
    }

    fn visit_saved(&self, visit: &mut dyn FnMut(&Saved<R>)) {
        self.saved.iter().for_each(visit);
    }
}

enum NodeKind<'a, R: Real> {
    Param(ParamId),
    Input,
    Op(Box<dyn BackwardOp<R> + 'a>),
    Spent,
}

struct Node<'a, R: Real> {
    kind: NodeKind<'a, R>,
    inputs: Vec<Option<usize>>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<R> {
    tape: u64,
    params: BTreeMap<ParamId, Vec<R>>,
    inputs: BTreeMap<usize, Vec<R>>,
}

impl<R: Real> Gradients<R> {
    fn new(tape: u64) -> Self {
        Gradients { tape, params: BTreeMap::new(), inputs: BTreeMap::new() }
    }

    pub fn param(&self, id: ParamId) -> Option<&[R]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[R])> {
        self.params.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    /// Gradient with respect to a leaf created by [`Tape::input`].
    pub fn input(&self, var: &Var<R>) -> Option<&[R]> {
        if var.tape != self.tape {
            return None;
        }
        var.node.and_then(|n| self.inputs.get(&n)).map(Vec::as_slice)
    }

    pub(crate) fn take_input(&mut self, var: &Var<R>) -> Option<Vec<R>> {
        if var.tape != self.tape {
            return None;
        }
        var.node.and_then(|n| self.inputs.remove(&n))
    }

    pub(crate) fn add_param(&mut self, id: ParamId, g: Vec<R>) {
        match self.params.get_mut(&id) {
            Some(slot) => slot.iter_mut().zip(&g).for_each(|(s, &v)| *s += v),
            None => {
                self.params.insert(id, g);
            }
        }
    }

    /// Adds another pass's parameter gradients into this one.
    pub fn merge_params(&mut self, other: Gradients<R>) {
        for (id, g) in other.params {
            self.add_param(id, g);
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params.values().flatten().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: R) {
        self.params.values_mut().flatten().for_each(|v| *v *= factor);
    }
}

/// Records forward ops and replays them in reverse for gradients.
pub struct Tape<'a, R: Real> {
    id: u64,
    params: &'a ParamSet<R>,
    pub(crate) ledger: Ledger,
    pub(crate) recording: bool,
    nodes: Vec<Node<'a, R>>,
}

impl<'a, R: Real> Tape<'a, R> {
    pub fn new(params: &'a ParamSet<R>) -> Self {
        Self::with_ledger(params, Ledger::new(), true)
    }

    /// A tape that evaluates values without recording anything.
    pub fn no_grad(params: &'a ParamSet<R>) -> Self {
        Self::with_ledger(params, Ledger::new(), false)
    }

    pub fn with_ledger(params: &'a ParamSet<R>, ledger: Ledger, recording: bool) -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), params, ledger, recording, nodes: Vec::new() }
    }

    /// A nested tape sharing this tape's parameters and ledger.
    pub fn child(&self, recording: bool) -> Self {
        Self::with_ledger(self.params, self.ledger.clone(), recording)
    }

    pub fn params(&self) -> &'a ParamSet<R> {
        self.params
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn memory_report(&self) -> MemoryReport {
        self.ledger.report()
    }

    fn var(&self, node: Option<usize>, shape: Vec<usize>, buf: Rc<Buffer<R>>) -> Var<R> {
        Var { tape: self.id, node, shape, buf }
    }

    pub fn constant(&self, tensor: &Tensor<R>) -> Var<R> {
        self.constant_vec(tensor.shape().to_vec(), tensor.data().to_vec())
    }

    pub fn constant_vec(&self, shape: Vec<usize>, data: Vec<R>) -> Var<R> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.var(None, shape, Rc::new(Buffer::new(data, BufKind::Constant)))
    }

    pub fn scalar_const(&self, value: R) -> Var<R> {
        self.constant_vec(Vec::new(), vec![value])
    }

    /// A differentiable leaf whose gradient is reported by
    /// [`Gradients::input`].
    pub fn input(&mut self, tensor: &Tensor<R>) -> Var<R> {
        self.input_vec(tensor.shape().to_vec(), tensor.data().to_vec())
    }

    pub fn input_vec(&mut self, shape: Vec<usize>, data: Vec<R>) -> Var<R> {
        let buf = Rc::new(Buffer::new(data, BufKind::Activation));
        self.input_buffer(shape, buf)
    }

    pub(crate) fn input_buffer(&mut self, shape: Vec<usize>, buf: Rc<Buffer<R>>) -> Var<R> {
        let node = self.recording.then(|| self.push(NodeKind::Input, Vec::new()));
        self.var(node, shape, buf)
    }

    pub fn param(&mut self, id: ParamId) -> Var<R> {
        let tensor = self.params.get(id);
        let shape = tensor.shape().to_vec();
        let buf = self.params.buffer(id);
        let node = (self.recording && tensor.requires_grad()).then(|| self.push(NodeKind::Param(id), Vec::new()));
        self.var(node, shape, buf)
    }

    fn push(&mut self, kind: NodeKind<'a, R>, inputs: Vec<Option<usize>>) -> usize {
        self.nodes.push(Node { kind, inputs });
        self.nodes.len() - 1
    }

    fn check_owned(&self, inputs: &[&Var<R>]) -> Result<()> {
        if inputs.iter().any(|v| v.node.is_some() && v.tape != self.id) {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    /// Records an op producing `data`. `make` builds the backward rule and is
    /// only invoked when some input is tracked on a recording tape.
    pub(crate) fn record<F>(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<R>,
        inputs: &[&Var<R>],
        make: F,
    ) -> Result<Var<R>>
    where
        F: FnOnce(&Rc<Buffer<R>>, &Ledger) -> Box<dyn BackwardOp<R> + 'a>,
    {
        self.check_owned(inputs)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}");
        let buf = Rc::new(Buffer::new(data, BufKind::Activation));
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        let node = if tracked {
            let backward = make(&buf, &self.ledger);
            let ins = inputs.iter().map(|v| v.node).collect();
            Some(self.push(NodeKind::Op(backward), ins))
        } else {
            None
        };
        Ok(self.var(node, shape, buf))
    }

    /// Gradients of a scalar loss with respect to every tracked leaf.
    /// Consumes the recording; all retained buffers are released.
    pub fn backward(&mut self, loss: &Var<R>) -> Result<Gradients<R>> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape.clone()));
        }
        self.backward_seeded(loss, vec![R::one()])
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_seeded(&mut self, out: &Var<R>, seed: Vec<R>) -> Result<Gradients<R>> {
        if out.tape != self.id && out.node.is_some() {
            return Err(Error::ForeignVar);
        }
        let Some(root) = out.node.filter(|&n| n < self.nodes.len()) else {
            return Err(Error::NothingRecorded);
        };
        if matches!(self.nodes[root].kind, NodeKind::Spent) {
            return Err(Error::NothingRecorded);
        }
        if seed.len() != out.numel() {
            return Err(Error::shape("backward", format!("seed {} vs output {}", seed.len(), out.numel())));
        }
        let result = self.run_backward(root, seed);
        self.nodes.clear();
        result
    }

    fn run_backward(&mut self, root: usize, seed: Vec<R>) -> Result<Gradients<R>> {
        let mut acc = Gradients::new(self.id);
        let mut grads: Vec<Option<Vec<R>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(seed);
        self.nodes.truncate(root + 1);

        for i in (0..=root).rev() {
            let kind = mem::replace(&mut self.nodes[i].kind, NodeKind::Spent);
            let inputs = mem::take(&mut self.nodes[i].inputs);
            let Some(g) = grads[i].take() else { continue };
            match kind {
                NodeKind::Param(id) => acc.add_param(id, g),
                NodeKind::Input => {
                    acc.inputs.insert(i, g);
                }
                NodeKind::Op(op) => {
                    let name = op.name();
                    let needs: Vec<bool> = inputs.iter().map(Option::is_some).collect();
                    let gin = op.backward(&g, &needs, &mut acc)?;
                    debug_assert_eq!(gin.len(), inputs.len(), "{name}");
                    for (slot, gi) in inputs.iter().zip(gin) {
                        let (Some(j), Some(gi)) = (slot, gi) else { continue };
                        if !gi.iter().all(|v| v.is_finite()) {
                            return Err(Error::NonFinite { op: name });
                        }
                        match &mut grads[*j] {
                            Some(existing) => existing.iter_mut().zip(&gi).for_each(|(e, &v)| *e += v),
                            empty => *empty = Some(gi),
                        }
                    }
                }
                NodeKind::Spent => return Err(Error::NothingRecorded),
            }
        }
        Ok(acc)
    }

    /// Walks every retained buffer on this tape (and tapes nested inside its
    /// ops) and returns the distinct activation bytes and buffer count.
    pub fn audit_retained(&self) -> (usize, usize) {
        let mut seen = HashSet::new();
        let mut bytes = 0;
        for node in &self.nodes {
            if let NodeKind::Op(op) = &node.kind {
                op.visit_saved(&mut |s| {
                    let (ptr, n, kind) = s.key();
                    if kind == BufKind::Activation && seen.insert(ptr) {
                        bytes += n;
                    }
                });
            }
        }
        (bytes, seen.len())
    }

    pub(crate) fn visit_saved(&self, visit: &mut dyn FnMut(&Saved<R>)) {
        for node in &self.nodes {
            if let NodeKind::Op(op) = &node.kind {
                op.visit_saved(visit);
            }
        }
    }
}
