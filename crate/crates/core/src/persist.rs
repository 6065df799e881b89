//! Bit-exact binary serialization of engine state.
//!
//! Everything is little-endian with explicit section tags; floats are stored
//! as raw IEEE-754 bits so a round trip reproduces evaluation outputs
//! bit for bit. The container format (magic, versioning, sections) lives in
//! the CLI layer; these are the payload codecs.

use std::collections::BTreeMap;

use byteorder::{ByteOrder, LittleEndian as LE};

use crate::consolidation::{ConsolidationState, ConsolidationValue, Entry};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{
    Activation, Column, ColumnarNetwork, DenseLayer, Head, NodeId, Owner, ParamId, Site, SourceId,
    TaskId, TransferLink,
};
use crate::tasks::{RehearsalBuffer, Sample};

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        let mut b = [0u8; 4];
        LE::write_u32(&mut b, v);
        self.buf.extend_from_slice(&b);
    }

    pub fn u64(&mut self, v: u64) {
        let mut b = [0u8; 8];
        LE::write_u64(&mut b, v);
        self.buf.extend_from_slice(&b);
    }

    pub fn u128(&mut self, v: u128) {
        let mut b = [0u8; 16];
        LE::write_u128(&mut b, v);
        self.buf.extend_from_slice(&b);
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }
}

impl Default for Writer {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Persist("unexpected end of data".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    pub fn done(&self) -> bool {
        self.at == self.buf.len()
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(LE::read_u32(self.take(4)?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(LE::read_u64(self.take(8)?))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(LE::read_u128(self.take(16)?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|e| Error::Persist(format!("bad utf8: {e}")))
    }
}

fn write_matrix(w: &mut Writer, m: &Matrix<f64>) {
    w.usize(m.rows());
    w.usize(m.cols());
    for v in m.data() {
        w.f64(*v);
    }
}

fn read_matrix(r: &mut Reader) -> Result<Matrix<f64>> {
    let rows = r.usize()?;
    let cols = r.usize()?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.f64()?);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

fn write_activation(w: &mut Writer, a: Activation) {
    w.u8(match a {
        Activation::Relu => 0,
        Activation::Tanh => 1,
        Activation::Identity => 2,
    });
}

fn read_activation(r: &mut Reader) -> Result<Activation> {
    Ok(match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        2 => Activation::Identity,
        t => return Err(Error::Persist(format!("unknown activation tag {t}"))),
    })
}

fn write_layer(w: &mut Writer, l: &DenseLayer<f64>) {
    write_matrix(w, &l.weights);
    w.usize(l.biases.len());
    for b in &l.biases {
        w.f64(*b);
    }
    write_activation(w, l.activation);
}

fn read_layer(r: &mut Reader) -> Result<DenseLayer<f64>> {
    let weights = read_matrix(r)?;
    let n = r.usize()?;
    let mut biases = Vec::with_capacity(n);
    for _ in 0..n {
        biases.push(r.f64()?);
    }
    let activation = read_activation(r)?;
    Ok(DenseLayer { weights, biases, activation })
}

fn write_ids(w: &mut Writer, ids: &[NodeId]) {
    w.usize(ids.len());
    for id in ids {
        w.u32(id.0);
    }
}

fn read_ids(r: &mut Reader) -> Result<Vec<NodeId>> {
    let n = r.usize()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(NodeId(r.u32()?));
    }
    Ok(out)
}

pub fn encode_network(net: &ColumnarNetwork<f64>) -> Vec<u8> {
    let mut w = Writer::new();
    w.usize(net.input_width);
    write_ids(&mut w, &net.input_ids);
    w.u32(net.next_node);
    w.u64(net.version);
    w.u64(net.master_seed);
    w.u64(net.rng_events);
    w.usize(net.columns.len());
    for col in &net.columns {
        match &col.owner {
            Owner::Task(t) => {
                w.u8(0);
                w.u32(t.0);
            }
            Owner::Shared(set) => {
                w.u8(1);
                w.usize(set.len());
                for t in set {
                    w.u32(t.0);
                }
            }
        }
        w.usize(col.layers.len());
        for (li, layer) in col.layers.iter().enumerate() {
            write_layer(&mut w, layer);
            write_ids(&mut w, &col.node_ids[li]);
            w.usize(col.stage_of[li].len());
            for s in &col.stage_of[li] {
                w.u32(*s as u32);
            }
        }
        w.usize(col.transfer_in.len());
        for link in &col.transfer_in {
            w.usize(link.src_column);
            w.usize(link.src_layer);
            w.usize(link.dst_layer);
            write_matrix(&mut w, &link.weights);
        }
        w.u32(col.stages as u32);
    }
    w.usize(net.heads.len());
    for head in net.heads.values() {
        w.u32(head.task.0);
        w.usize(head.own_column);
        w.usize(head.inputs.len());
        for (c, l) in &head.inputs {
            w.usize(*c);
            w.usize(*l);
        }
        write_layer(&mut w, &head.layer);
        write_ids(&mut w, &head.class_ids);
    }
    w.into_bytes()
}

pub fn decode_network(bytes: &[u8]) -> Result<ColumnarNetwork<f64>> {
    let mut r = Reader::new(bytes);
    let net = decode_network_from(&mut r)?;
    Ok(net)
}

pub fn decode_network_from(r: &mut Reader) -> Result<ColumnarNetwork<f64>> {
    let input_width = r.usize()?;
    let input_ids = read_ids(r)?;
    let next_node = r.u32()?;
    let version = r.u64()?;
    let master_seed = r.u64()?;
    let rng_events = r.u64()?;
    let ncols = r.usize()?;
    let mut columns = Vec::with_capacity(ncols);
    for _ in 0..ncols {
        let owner = match r.u8()? {
            0 => Owner::Task(TaskId(r.u32()?)),
            1 => {
                let n = r.usize()?;
                let mut set = std::collections::BTreeSet::new();
                for _ in 0..n {
                    set.insert(TaskId(r.u32()?));
                }
                Owner::Shared(set)
            }
            t => return Err(Error::Persist(format!("unknown owner tag {t}"))),
        };
        let nlayers = r.usize()?;
        let mut layers = Vec::with_capacity(nlayers);
        let mut node_ids = Vec::with_capacity(nlayers);
        let mut stage_of = Vec::with_capacity(nlayers);
        for _ in 0..nlayers {
            layers.push(read_layer(r)?);
            node_ids.push(read_ids(r)?);
            let n = r.usize()?;
            let mut stages = Vec::with_capacity(n);
            for _ in 0..n {
                stages.push(r.u32()? as u16);
            }
            stage_of.push(stages);
        }
        let nlinks = r.usize()?;
        let mut transfer_in = Vec::with_capacity(nlinks);
        for _ in 0..nlinks {
            transfer_in.push(TransferLink {
                src_column: r.usize()?,
                src_layer: r.usize()?,
                dst_layer: r.usize()?,
                weights: read_matrix(r)?,
            });
        }
        let stages = r.u32()? as u16;
        columns.push(Column {
            owner,
            layers,
            node_ids,
            stage_of,
            transfer_in,
            stages,
        });
    }
    let nheads = r.usize()?;
    let mut heads = BTreeMap::new();
    for _ in 0..nheads {
        let task = TaskId(r.u32()?);
        let own_column = r.usize()?;
        let nin = r.usize()?;
        let mut inputs = Vec::with_capacity(nin);
        for _ in 0..nin {
            inputs.push((r.usize()?, r.usize()?));
        }
        let layer = read_layer(r)?;
        let class_ids = read_ids(r)?;
        heads.insert(
            task,
            Head { task, own_column, inputs, layer, class_ids },
        );
    }
    let net = ColumnarNetwork {
        input_width,
        input_ids,
        columns,
        heads,
        next_node,
        version,
        master_seed,
        rng_events,
    };
    net.assert_dag();
    Ok(net)
}

fn write_site(w: &mut Writer, site: Site) {
    match site {
        Site::Hidden { column, layer } => {
            w.u8(0);
            w.usize(column);
            w.usize(layer);
        }
        Site::Transfer { column, link } => {
            w.u8(1);
            w.usize(column);
            w.usize(link);
        }
        Site::Head { task } => {
            w.u8(2);
            w.u32(task.0);
        }
    }
}

fn read_site(r: &mut Reader) -> Result<Site> {
    Ok(match r.u8()? {
        0 => Site::Hidden { column: r.usize()?, layer: r.usize()? },
        1 => Site::Transfer { column: r.usize()?, link: r.usize()? },
        2 => Site::Head { task: TaskId(r.u32()?) },
        t => return Err(Error::Persist(format!("unknown site tag {t}"))),
    })
}

pub fn encode_consolidation(cstate: &ConsolidationState<f64>) -> Vec<u8> {
    let mut w = Writer::new();
    w.usize(cstate.len());
    for (pid, entry) in cstate.iter() {
        write_site(&mut w, pid.site);
        w.u32(pid.row.0);
        match pid.col {
            SourceId::Node(n) => {
                w.u8(0);
                w.u32(n.0);
            }
            SourceId::Bias => w.u8(1),
        }
        match entry.value {
            ConsolidationValue::Finite(b) => {
                w.u8(0);
                w.f64(b);
            }
            ConsolidationValue::Mask => w.u8(1),
        }
        w.f64(entry.target);
    }
    w.into_bytes()
}

pub fn decode_consolidation(bytes: &[u8]) -> Result<ConsolidationState<f64>> {
    let mut r = Reader::new(bytes);
    decode_consolidation_from(&mut r)
}

pub fn decode_consolidation_from(r: &mut Reader) -> Result<ConsolidationState<f64>> {
    let n = r.usize()?;
    let mut out = ConsolidationState::new();
    for _ in 0..n {
        let site = read_site(r)?;
        let row = NodeId(r.u32()?);
        let col = match r.u8()? {
            0 => SourceId::Node(NodeId(r.u32()?)),
            1 => SourceId::Bias,
            t => return Err(Error::Persist(format!("unknown source tag {t}"))),
        };
        let value = match r.u8()? {
            0 => ConsolidationValue::Finite(r.f64()?),
            1 => ConsolidationValue::Mask,
            t => return Err(Error::Persist(format!("unknown consolidation tag {t}"))),
        };
        let target = r.f64()?;
        out.put(ParamId { site, row, col }, Entry { value, target });
    }
    Ok(out)
}

pub fn encode_sample_buffers(buffers: &BTreeMap<TaskId, RehearsalBuffer<Sample>>) -> Vec<u8> {
    let mut w = Writer::new();
    w.usize(buffers.len());
    for (task, buf) in buffers {
        w.u32(task.0);
        let (capacity, seen, items, rng_seed, word_pos) = buf.persist_parts();
        w.usize(capacity);
        w.u64(seen);
        w.usize(items.len());
        for s in items {
            w.usize(s.features.len());
            for v in &s.features {
                w.f64(*v);
            }
            w.usize(s.label);
        }
        w.buf.extend_from_slice(&rng_seed);
        w.u128(word_pos);
    }
    w.into_bytes()
}

pub fn decode_sample_buffers(bytes: &[u8]) -> Result<BTreeMap<TaskId, RehearsalBuffer<Sample>>> {
    let mut r = Reader::new(bytes);
    decode_sample_buffers_from(&mut r)
}

pub fn decode_sample_buffers_from(
    r: &mut Reader,
) -> Result<BTreeMap<TaskId, RehearsalBuffer<Sample>>> {
    let n = r.usize()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let task = TaskId(r.u32()?);
        let capacity = r.usize()?;
        let seen = r.u64()?;
        let nitems = r.usize()?;
        let mut items = Vec::with_capacity(nitems);
        for _ in 0..nitems {
            let nf = r.usize()?;
            let mut features = Vec::with_capacity(nf);
            for _ in 0..nf {
                features.push(r.f64()?);
            }
            let label = r.usize()?;
            items.push(Sample { features, label });
        }
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(r.take(32)?);
        let word_pos = r.u128()?;
        out.insert(
            task,
            RehearsalBuffer::from_persist_parts(capacity, seen, items, rng_seed, word_pos),
        );
    }
    Ok(out)
}
