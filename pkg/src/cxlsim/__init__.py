"""cxlsim: a discrete-event, full-path simulator of CXL type-3 memory
expansion sitting behind the I/O bus and Root Complex, with firmware-table
topology exposure, page-interleaving programming models, and stream-based
characterization."""

__version__ = "0.1.0"
