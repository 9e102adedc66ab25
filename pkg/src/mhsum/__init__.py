"""Multi-hypothesis fusion for summarising noisy speech transcripts, at desk scale."""
