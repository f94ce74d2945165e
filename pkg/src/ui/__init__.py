# Report rendering
