from cogsem.config import RunConfig, load_config
from cogsem.errors import CoGSEMError
from cogsem.model import CoGSEM


__version__ = "0.1.0"
__all__ = ["CoGSEM", "CoGSEMError", "RunConfig", "load_config"]
