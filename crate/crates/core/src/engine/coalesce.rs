//! Write coalescing for scattered dirty extents.
//!
//! Extents are staged in one buffer covering a contiguous file window of at
//! most `threshold` bytes. Gaps between staged extents are filled from the
//! file itself when the window is flushed (read-modify-write), so a flush is a
//! single positioned write no matter how fragmented the extents are, and the
//! resulting file bytes are identical to writing every extent separately.

use std::fs::File;
use std::io;
use std::os::unix::fs::FileExt;
use std::time::Duration;

/// Positioned I/O on a file-like target.
pub trait PositionedIo {
    fn write_at(&mut self, buf: &[u8], offset: u64) -> io::Result<()>;
    fn read_at(&mut self, buf: &mut [u8], offset: u64) -> io::Result<()>;
}

impl PositionedIo for File {
    fn write_at(&mut self, buf: &[u8], offset: u64) -> io::Result<()> {
        self.write_all_at(buf, offset)
    }

    fn read_at(&mut self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        self.read_exact_at(buf, offset)
    }
}

/// In-memory target; writes past the end extend it with zeros.
impl PositionedIo for Vec<u8> {
    fn write_at(&mut self, buf: &[u8], offset: u64) -> io::Result<()> {
        let end = offset as usize + buf.len();
        if self.len() < end {
            self.resize(end, 0);
        }
        self[offset as usize..end].copy_from_slice(buf);
        Ok(())
    }

    fn read_at(&mut self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        let src = self
            .get(offset as usize..offset as usize + buf.len())
            .ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        buf.copy_from_slice(src);
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WriteStats {
    pub write_calls: u64,
    pub read_calls: u64,
    pub flushes: u64,
    /// Bytes handed to the writer.
    pub payload_bytes: u64,
    /// Bytes that reached the target, gap fill included.
    pub bytes_written: u64,
    pub bytes_read_back: u64,
    /// Size of every extent handed to the writer.
    pub extent_sizes: Vec<u64>,
    /// Size of every write call issued.
    pub write_sizes: Vec<u64>,
}

impl WriteStats {
    pub fn merge(&mut self, other: &WriteStats) {
        self.write_calls += other.write_calls;
        self.read_calls += other.read_calls;
        self.flushes += other.flushes;
        self.payload_bytes += other.payload_bytes;
        self.bytes_written += other.bytes_written;
        self.bytes_read_back += other.bytes_read_back;
        self.extent_sizes.extend_from_slice(&other.extent_sizes);
        self.write_sizes.extend_from_slice(&other.write_sizes);
    }
}

pub struct CoalescingWriter<'a, T: PositionedIo> {
    io: &'a mut T,
    /// `None` disables coalescing: one write call per extent.
    threshold: Option<usize>,
    call_latency: Option<Duration>,
    buf: Vec<u8>,
    window_start: u64,
    /// Unfilled holes inside the window, as (buffer offset, len).
    gaps: Vec<(usize, usize)>,
    stats: WriteStats,
}

impl<'a, T: PositionedIo> CoalescingWriter<'a, T> {
    pub fn new(io: &'a mut T, threshold: Option<usize>) -> Self {
        assert!(threshold != Some(0), "coalescing threshold must be positive");
        CoalescingWriter {
            io,
            threshold,
            call_latency: None,
            buf: Vec::with_capacity(threshold.unwrap_or(0)),
            window_start: 0,
            gaps: Vec::new(),
            stats: WriteStats::default(),
        }
    }

    /// Adds a fixed delay to every write call, emulating a storage target
    /// that penalizes small writes.
    pub fn with_call_latency(mut self, latency: Option<Duration>) -> Self {
        self.call_latency = latency;
        self
    }

    fn issue_write(&mut self, data: &[u8], offset: u64) -> io::Result<()> {
        if let Some(latency) = self.call_latency {
            std::thread::sleep(latency);
        }
        self.io.write_at(data, offset)?;
        self.stats.write_calls += 1;
        self.stats.bytes_written += data.len() as u64;
        self.stats.write_sizes.push(data.len() as u64);
        Ok(())
    }

    pub fn push(&mut self, offset: u64, data: &[u8]) -> io::Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        self.stats.payload_bytes += data.len() as u64;
        self.stats.extent_sizes.push(data.len() as u64);
        let Some(threshold) = self.threshold else {
            return self.issue_write(data, offset);
        };

        let mut offset = offset;
        let mut data = data;
        while !data.is_empty() {
            if !self.buf.is_empty() {
                let window_end = self.window_start + self.buf.len() as u64;
                let out_of_order = offset < window_end;
                let too_far = offset - self.window_start.min(offset) >= threshold as u64;
                if out_of_order || too_far {
                    self.flush()?;
                }
            }
            if self.buf.is_empty() {
                self.window_start = offset;
            }
            let rel = (offset - self.window_start) as usize;
            if rel > self.buf.len() {
                self.gaps.push((self.buf.len(), rel - self.buf.len()));
                self.buf.resize(rel, 0);
            }
            let take = data.len().min(threshold - rel);
            self.buf.extend_from_slice(&data[..take]);
            data = &data[take..];
            offset += take as u64;
            if self.buf.len() >= threshold {
                self.flush()?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> io::Result<()> {
        if self.buf.is_empty() {
            return Ok(());
        }
        let mut buf = std::mem::take(&mut self.buf);
        for (at, len) in std::mem::take(&mut self.gaps) {
            self.io.read_at(&mut buf[at..at + len], self.window_start + at as u64)?;
            self.stats.read_calls += 1;
            self.stats.bytes_read_back += len as u64;
        }
        let res = self.issue_write(&buf, self.window_start);
        buf.clear();
        self.buf = buf;
        self.stats.flushes += 1;
        res
    }

    pub fn finish(mut self) -> io::Result<WriteStats> {
        self.flush()?;
        Ok(std::mem::take(&mut self.stats))
    }
}
