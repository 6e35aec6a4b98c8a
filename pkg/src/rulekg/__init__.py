"""Joint entity/relation/rule embedding and soft rule reasoning for KG completion."""
