//! Simulated collectives among `N` workers with a bit-exact ledger.
//!
//! Collectives are computed at a root: every worker's message is delivered to
//! it, decoded, summed in worker-index order and divided by `N`, and the mean is
//! broadcast back. The ledger charges the canonical encoded size of every
//! worker's message (payload and metadata separately) for every call. It does
//! not model ring or tree traffic.
//!
//! Two transports sit behind the same interface: an in-process one that hands
//! messages over directly, and a loopback TCP mesh that frames each message as
//! a 4-byte little-endian length followed by its wide (`f64`) encoding.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compress::{CompressedMessage, ValueWidth};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub step: u64,
    pub layer: String,
    pub compressor: String,
    pub payload_bits: u64,
    pub metadata_bits: u64,
    /// Collective that produced the record; not part of the CSV export.
    #[serde(skip)]
    pub op: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub records: Vec<CommRecord>,
}

impl Ledger {
    pub fn push(&mut self, r: CommRecord) {
        self.records.push(r);
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: Ledger) {
        self.records.extend(other.records);
    }

    pub fn total_payload_bits(&self) -> u64 {
        self.records.iter().map(|r| r.payload_bits).sum()
    }

    pub fn total_metadata_bits(&self) -> u64 {
        self.records.iter().map(|r| r.metadata_bits).sum()
    }

    /// CSV with columns `step,layer,compressor,payload_bits,metadata_bits`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = ["step", "layer", "compressor", "payload_bits", "metadata_bits"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::Format(format!("unexpected ledger columns {headers:?}")));
        }
        let records = rdr.deserialize().collect::<std::result::Result<Vec<CommRecord>, _>>()?;
        Ok(Self { records })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Where a collective call sits in the run.
#[derive(Debug, Clone)]
pub struct CallContext<'a> {
    pub step: u64,
    pub layer: &'a str,
    pub compressor: &'a str,
    pub op: &'a str,
}

pub enum Transport {
    InProcess,
    Loopback(LoopbackMesh),
}

/// One TCP connection per worker to the root, over 127.0.0.1.
pub struct LoopbackMesh {
    worker_ends: Vec<TcpStream>,
    root_ends: Vec<TcpStream>,
}

impl LoopbackMesh {
    pub fn new(n_workers: usize) -> Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let mut worker_ends = Vec::with_capacity(n_workers);
        let mut root_ends = Vec::with_capacity(n_workers);
        for _ in 0..n_workers {
            let client = TcpStream::connect(addr)?;
            let (server, _) = listener.accept()?;
            client.set_nodelay(true)?;
            server.set_nodelay(true)?;
            worker_ends.push(client);
            root_ends.push(server);
        }
        Ok(Self { worker_ends, root_ends })
    }

    /// Sends one frame from `from` and reads it at `to`.
    fn transfer(from: &mut TcpStream, to: &mut TcpStream, payload: &[u8]) -> Result<Vec<u8>> {
        let len = u32::try_from(payload.len())
            .map_err(|_| Error::Protocol("frame larger than 4 GiB".into()))?;
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(payload);
        std::thread::scope(|s| -> Result<Vec<u8>> {
            let writer = s.spawn(move || from.write_all(&frame));
            let received = read_frame(to);
            writer.join().expect("writer thread panicked")?;
            Ok(received?)
        })
    }

    fn gather(&mut self, msgs: &[CompressedMessage]) -> Result<Vec<CompressedMessage>> {
        let mut out = Vec::with_capacity(msgs.len());
        for ((w, r), msg) in self.worker_ends.iter_mut().zip(self.root_ends.iter_mut()).zip(msgs) {
            let bytes = Self::transfer(w, r, &msg.encode_with(ValueWidth::F64))?;
            out.push(CompressedMessage::decode_bytes(&bytes)?);
        }
        Ok(out)
    }

    fn broadcast(&mut self, mean: &Matrix) -> Result<()> {
        let bytes = CompressedMessage::Dense(mean.clone()).encode_with(ValueWidth::F64);
        for (w, r) in self.worker_ends.iter_mut().zip(self.root_ends.iter_mut()) {
            let got = Self::transfer(r, w, &bytes)?;
            if got != bytes {
                return Err(Error::Protocol("broadcast frame corrupted".into()));
            }
        }
        Ok(())
    }
}

fn read_frame(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

pub struct WorkerGroup {
    n_workers: usize,
    transport: Transport,
    ledger: Ledger,
}

impl WorkerGroup {
    pub fn new(n_workers: usize) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        Ok(Self { n_workers, transport: Transport::InProcess, ledger: Ledger::default() })
    }

    pub fn loopback(n_workers: usize) -> Result<Self> {
        let mut g = Self::new(n_workers)?;
        g.transport = Transport::Loopback(LoopbackMesh::new(n_workers)?);
        Ok(g)
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn take_ledger(&mut self) -> Ledger {
        std::mem::take(&mut self.ledger)
    }

    /// Mean of the decoded messages, one per worker, in worker order.
    pub fn all_reduce_mean(&mut self, ctx: &CallContext<'_>, msgs: &[CompressedMessage]) -> Result<Matrix> {
        if msgs.len() != self.n_workers {
            return Err(Error::Protocol(format!(
                "collective expects {} messages, got {}",
                self.n_workers,
                msgs.len()
            )));
        }
        let first = &msgs[0];
        for (i, m) in msgs.iter().enumerate().skip(1) {
            if m.variant_name() != first.variant_name() || m.dims() != first.dims() {
                return Err(Error::Protocol(format!(
                    "worker {i} sent {} {:?}, worker 0 sent {} {:?}",
                    m.variant_name(),
                    m.dims(),
                    first.variant_name(),
                    first.dims()
                )));
            }
        }

        let delivered;
        let at_root: &[CompressedMessage] = match &mut self.transport {
            Transport::InProcess => msgs,
            Transport::Loopback(mesh) => {
                delivered = mesh.gather(msgs)?;
                &delivered
            }
        };

        let mut sum = at_root[0].reconstruct()?;
        for m in &at_root[1..] {
            sum.add_assign(&m.reconstruct()?)?;
        }
        let n = self.n_workers as f64;
        let mean = sum.map(|v| v / n);

        if let Transport::Loopback(mesh) = &mut self.transport {
            mesh.broadcast(&mean)?;
        }

        let mut payload_bits = 0;
        let mut metadata_bits = 0;
        for m in msgs {
            let w = m.wire_size();
            payload_bits += w.payload_bits;
            metadata_bits += w.metadata_bits;
        }
        self.ledger.push(CommRecord {
            step: ctx.step,
            layer: ctx.layer.to_string(),
            compressor: ctx.compressor.to_string(),
            payload_bits,
            metadata_bits,
            op: ctx.op.to_string(),
        });
        Ok(mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub compressor: String,
    pub epoch: u64,
    pub payload_bits: u64,
    pub metadata_bits: u64,
    /// Identity payload divided by this payload, for the same epoch.
    pub payload_ratio_vs_identity: Option<f64>,
    pub total_ratio_vs_identity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub rows: Vec<EpochRow>,
}

/// Sums the ledger per compressor and epoch (`step / steps_per_epoch`). Ratios
/// are filled in when the ledger also holds `identity` records for that epoch.
pub fn bytes_per_epoch(ledger: &Ledger, steps_per_epoch: u64) -> Result<EpochReport> {
    if steps_per_epoch == 0 {
        return Err(Error::Config("steps_per_epoch must be positive".into()));
    }
    let mut sums: BTreeMap<(String, u64), (u64, u64)> = BTreeMap::new();
    for r in &ledger.records {
        let e = sums.entry((r.compressor.clone(), r.step / steps_per_epoch)).or_default();
        e.0 += r.payload_bits;
        e.1 += r.metadata_bits;
    }
    let rows = sums
        .iter()
        .map(|((compressor, epoch), &(payload, meta))| {
            let baseline = sums.get(&("identity".to_string(), *epoch));
            EpochRow {
                compressor: compressor.clone(),
                epoch: *epoch,
                payload_bits: payload,
                metadata_bits: meta,
                payload_ratio_vs_identity: baseline.map(|b| b.0 as f64 / payload as f64),
                total_ratio_vs_identity: baseline.map(|b| (b.0 + b.1) as f64 / (payload + meta) as f64),
            }
        })
        .collect();
    Ok(EpochReport { rows })
}
