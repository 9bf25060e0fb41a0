# Shared plumbing for the LSF pipeline: errors, configuration, artifacts, synthetic records
