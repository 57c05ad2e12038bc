//! Huffman entropy coding over byte alphabets.
//!
//! The tree is built by the classic repeated Extract-Min/merge procedure with
//! deterministic tie-breaking by (frequency, smallest contained symbol). Only
//! the code *lengths* are kept and stored (256 bytes); codes are assigned in
//! canonical order, which preserves the construction's lengths while keeping
//! the table overhead fixed and small.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{MoecError, Result};

/// Code lengths can exceed a u64 register only for astronomically long
/// inputs (Fibonacci-distributed frequencies past ~10^13 symbols).
const MAX_CODE_LEN: u8 = 63;

/// Canonical prefix code over the byte alphabet.
#[derive(Debug, Clone)]
pub struct HuffmanTree {
    /// Code length per byte value; 0 marks an absent symbol.
    pub lengths: [u8; 256],
    /// Canonical code bits per byte value (valid where `lengths > 0`).
    codes: [u64; 256],
}

impl HuffmanTree {
    pub fn code(&self, sym: u8) -> Option<(u64, u8)> {
        let len = self.lengths[sym as usize];
        (len > 0).then(|| (self.codes[sym as usize], len))
    }

    /// Σ 2^−len over all used symbols; exactly 1 for any full binary tree
    /// with ≥ 2 leaves.
    pub fn kraft_sum(&self) -> f64 {
        self.lengths
            .iter()
            .filter(|&&l| l > 0)
            .map(|&l| (0.5f64).powi(l as i32))
            .sum()
    }

    /// Weighted code length Σ freq·len.
    pub fn cost(&self, freqs: &[u64; 256]) -> u64 {
        freqs
            .iter()
            .zip(&self.lengths)
            .map(|(&f, &l)| f * l as u64)
            .sum()
    }
}

/// Build the tree per the classic procedure: seed a min-queue with one node
/// per used symbol, then repeatedly extract the two minima, merge them into a
/// node carrying the summed frequency and reinsert, until one root remains.
/// A single-symbol alphabet gets the one-bit code "0".
pub fn huffman_build(freqs: &[u64; 256]) -> Result<HuffmanTree> {
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    struct Key {
        freq: u64,
        min_sym: u16,
    }
    struct Node {
        children: Option<(usize, usize)>,
        sym: u8,
    }

    let mut nodes: Vec<Node> = Vec::new();
    let mut heap: BinaryHeap<Reverse<(Key, usize)>> = BinaryHeap::new();
    for (sym, &f) in freqs.iter().enumerate() {
        if f > 0 {
            let id = nodes.len();
            nodes.push(Node {
                children: None,
                sym: sym as u8,
            });
            heap.push(Reverse((
                Key {
                    freq: f,
                    min_sym: sym as u16,
                },
                id,
            )));
        }
    }
    if heap.is_empty() {
        return Err(MoecError::InvalidArgument("huffman_build on empty input".into()));
    }

    let mut lengths = [0u8; 256];
    if heap.len() == 1 {
        let Reverse((_, id)) = heap.pop().unwrap();
        lengths[nodes[id].sym as usize] = 1;
        return canonicalize(lengths);
    }

    while heap.len() > 1 {
        let Reverse((kx, x)) = heap.pop().unwrap();
        let Reverse((ky, y)) = heap.pop().unwrap();
        let id = nodes.len();
        nodes.push(Node {
            children: Some((x, y)),
            sym: 0,
        });
        heap.push(Reverse((
            Key {
                freq: kx.freq + ky.freq,
                min_sym: kx.min_sym.min(ky.min_sym),
            },
            id,
        )));
    }
    let Reverse((_, root)) = heap.pop().unwrap();

    // iterative depth walk
    let mut stack = vec![(root, 0u16)];
    while let Some((id, depth)) = stack.pop() {
        match nodes[id].children {
            Some((l, r)) => {
                stack.push((l, depth + 1));
                stack.push((r, depth + 1));
            }
            None => {
                if depth > MAX_CODE_LEN as u16 {
                    return Err(MoecError::InvalidArgument(format!(
                        "huffman code length {depth} exceeds the supported {MAX_CODE_LEN}"
                    )));
                }
                lengths[nodes[id].sym as usize] = depth as u8;
            }
        }
    }
    canonicalize(lengths)
}

/// Assign canonical codes: symbols ordered by (length, value) get sequential
/// codes, extended by the length delta.
fn canonicalize(lengths: [u8; 256]) -> Result<HuffmanTree> {
    let mut order: Vec<u8> = (0..=255u8).filter(|&s| lengths[s as usize] > 0).collect();
    order.sort_by_key(|&s| (lengths[s as usize], s));
    let mut codes = [0u64; 256];
    let mut code: u64 = 0;
    let mut prev_len = 0u8;
    for (i, &sym) in order.iter().enumerate() {
        let len = lengths[sym as usize];
        if len > MAX_CODE_LEN {
            return Err(MoecError::InvalidArgument("code length overflow".into()));
        }
        if i > 0 {
            code = (code + 1) << (len - prev_len);
        }
        codes[sym as usize] = code;
        prev_len = len;
    }
    Ok(HuffmanTree { lengths, codes })
}

/// Rebuild a tree from stored code lengths (validates a decodable table).
pub fn tree_from_lengths(lengths: [u8; 256]) -> Result<HuffmanTree> {
    let used: Vec<u8> = (0..=255u8).filter(|&s| lengths[s as usize] > 0).collect();
    if used.is_empty() {
        return Err(MoecError::CorruptArtifact("huffman table has no symbols".into()));
    }
    if used.len() >= 2 {
        let kraft: f64 = used
            .iter()
            .map(|&s| (0.5f64).powi(lengths[s as usize] as i32))
            .sum();
        if (kraft - 1.0).abs() > 1e-9 {
            return Err(MoecError::CorruptArtifact(format!(
                "huffman table violates Kraft equality (sum {kraft})"
            )));
        }
    }
    canonicalize(lengths)
}

/// MSB-first bit-packed encoding of `bytes`.
pub struct HuffmanEncoded {
    pub lengths: [u8; 256],
    pub bitstream: Vec<u8>,
    pub bit_len: u64,
    pub n_values: u64,
}

impl HuffmanEncoded {
    /// Stored size: the 256-byte table plus the padded bitstream.
    pub fn stored_size(&self) -> usize {
        256 + self.bitstream.len()
    }
}

pub fn huffman_encode(bytes: &[u8]) -> Result<HuffmanEncoded> {
    if bytes.is_empty() {
        return Err(MoecError::InvalidArgument("huffman_encode on empty input".into()));
    }
    let mut freqs = [0u64; 256];
    for &b in bytes {
        freqs[b as usize] += 1;
    }
    let tree = huffman_build(&freqs)?;
    let distinct = tree.lengths.iter().filter(|&&l| l > 0).count();
    if distinct == 1 {
        // single-symbol stream: the run length says it all
        return Ok(HuffmanEncoded {
            lengths: tree.lengths,
            bitstream: Vec::new(),
            bit_len: 0,
            n_values: bytes.len() as u64,
        });
    }
    let mut bitstream = Vec::new();
    let mut acc: u64 = 0;
    let mut n_acc: u8 = 0;
    for &b in bytes {
        let (code, len) = tree.code(b).expect("symbol has a code");
        let mut rem = len;
        let mut c = code;
        while rem > 0 {
            let take = rem.min(8 - n_acc);
            let shift = rem - take;
            let piece = (c >> shift) & ((1 << take) - 1);
            acc = (acc << take) | piece;
            n_acc += take;
            rem -= take;
            c &= (1u64 << shift).wrapping_sub(1);
            if n_acc == 8 {
                bitstream.push(acc as u8);
                acc = 0;
                n_acc = 0;
            }
        }
    }
    let mut bit_len = (bitstream.len() as u64) * 8;
    if n_acc > 0 {
        bit_len += n_acc as u64;
        bitstream.push((acc << (8 - n_acc)) as u8);
    }
    Ok(HuffmanEncoded {
        lengths: tree.lengths,
        bitstream,
        bit_len,
        n_values: bytes.len() as u64,
    })
}

pub fn huffman_decode(
    lengths: [u8; 256],
    bitstream: &[u8],
    bit_len: u64,
    n_values: u64,
) -> Result<Vec<u8>> {
    let tree = tree_from_lengths(lengths)?;
    let used: Vec<u8> = {
        let mut v: Vec<u8> = (0..=255u8).filter(|&s| lengths[s as usize] > 0).collect();
        v.sort_by_key(|&s| (lengths[s as usize], s));
        v
    };
    if used.len() == 1 {
        return Ok(vec![used[0]; n_values as usize]);
    }
    let max_len = used.iter().map(|&s| lengths[s as usize]).max().unwrap();
    // canonical decode tables: first code and symbol offset per length
    let mut first_code = [0u64; 64 + 1];
    let mut first_index = [0usize; 64 + 1];
    let mut count = [0usize; 64 + 1];
    for (i, &s) in used.iter().enumerate() {
        let l = lengths[s as usize] as usize;
        if count[l] == 0 {
            first_code[l] = tree.code(s).unwrap().0;
            first_index[l] = i;
        }
        count[l] += 1;
    }

    let mut out = Vec::with_capacity(n_values as usize);
    let mut code: u64 = 0;
    let mut len = 0usize;
    let mut bits_read = 0u64;
    'outer: for &byte in bitstream {
        for bit in (0..8).rev() {
            if bits_read == bit_len {
                break 'outer;
            }
            bits_read += 1;
            code = (code << 1) | ((byte >> bit) & 1) as u64;
            len += 1;
            if len > max_len as usize {
                return Err(MoecError::CorruptArtifact(
                    "huffman stream contains an invalid code".into(),
                ));
            }
            if count[len] > 0 {
                let offset = code.wrapping_sub(first_code[len]);
                if code >= first_code[len] && (offset as usize) < count[len] {
                    out.push(used[first_index[len] + offset as usize]);
                    code = 0;
                    len = 0;
                    if out.len() == n_values as usize {
                        break 'outer;
                    }
                }
            }
        }
    }
    if out.len() != n_values as usize || len != 0 {
        return Err(MoecError::CorruptArtifact(format!(
            "huffman stream ended early: {} of {} symbols",
            out.len(),
            n_values
        )));
    }
    Ok(out)
}
