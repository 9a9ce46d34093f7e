"""Two-block encoder-decoder point-cloud reconstruction."""
