"""Scale-adaptive partition learning for cross-view drone/satellite retrieval."""
