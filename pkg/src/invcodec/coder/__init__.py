from .cdf import TOTAL, V_MAX, V_MIN, Table, TableBank, build_cdf, sigma_level, table_bank
from .container import Container, ContainerError, symbols_crc
from .rangecoder import DecodeError, RangeDecoder, RangeEncoder, decode_symbols, encode_symbols

__all__ = [
    "TOTAL", "V_MAX", "V_MIN", "Table", "TableBank", "build_cdf", "sigma_level", "table_bank",
    "Container", "ContainerError", "symbols_crc",
    "DecodeError", "RangeDecoder", "RangeEncoder", "decode_symbols", "encode_symbols",
]
