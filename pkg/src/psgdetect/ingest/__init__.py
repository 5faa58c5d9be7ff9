"""EDF ingestion, montage derivation and annotation sidecars."""
