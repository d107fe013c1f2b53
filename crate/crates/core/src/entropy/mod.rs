//! Baseline-JPEG style entropy coding for measuring payload size.
//!
//! Blocks are zigzag scanned, DC values are DPCM coded and AC values run-length
//! coded into `(run, size)` symbols. Four canonical Huffman tables (DC/AC ×
//! luma/chroma) are fitted to a corpus; every table also codes an escape symbol
//! so that symbols unseen while fitting can still be written.

mod export;
mod huffman;
mod rate;
mod symbols;

pub use export::{export_qtables, ExportMetadata, KernelRows, QTableExport};
pub use huffman::{annex_k, code_lengths, BitReader, BitWriter, HuffmanTable, ALPHABET, ESC, ESC_LITERAL_BITS, MAX_CODE_LEN};
pub use rate::{
    build_from_encoded, build_huffman_tables, measure_encoded, measure_rate, sample_indices, ChannelBits,
    HuffmanCodec, ImageRate, RateReport, SymbolCounts, BITS_PER_KB,
};
pub use symbols::{
    ac_runlength_decode, ac_runlength_encode, amplitude_bits, dc_differential, dc_integrate, decode_amplitude,
    decode_blocks, encode_blocks, size_category, zigzag_scan, zigzag_unscan, BlockSymbols, Token, EOB, MAX_MAGNITUDE,
    ZIGZAG, ZRL,
};
