"""eSource clinical study pipeline.

Study protocols travel as ODM XML bundles carrying extraction queries and
eligibility criteria; data node connectors embedded at GP practices pull
protocols, screen encounters, pre-populate eCRFs from the local EHR and push
pseudonymized form data to a central study system, with provenance recorded
end to end and evaluation statistics over the resulting recruitment logs.
"""

__version__ = "0.1.0"
