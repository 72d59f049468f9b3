"""Stack-safety testing laboratory: tagged machine, security semantics, properties, policies, generator."""
