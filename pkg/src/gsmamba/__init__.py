"""GraphScan routing and Mamba-1/S6 selective scan."""
